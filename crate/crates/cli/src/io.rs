use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nada_core::dataio::{read_attention_stack, read_stack_header, records, AttentionStack};
use serde::de::DeserializeOwned;

pub struct Paths {
    root: Option<PathBuf>,
}

impl Paths {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    records::read_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// File sink when a path is given, standard output otherwise.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Stack files of a directory, keyed by the image id in their headers.
pub struct StackIndex {
    paths: HashMap<String, PathBuf>,
}

impl StackIndex {
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "nada") && p.is_file())
            .collect();
        entries.sort();
        let mut paths = HashMap::new();
        for p in entries {
            let header = read_stack_header(open(&p)?)
                .with_context(|| format!("reading header of {}", p.display()))?;
            if let Some(prev) = paths.insert(header.image_id.clone(), p.clone()) {
                bail!(
                    "image {:?} has two stacks: {} and {}",
                    header.image_id,
                    prev.display(),
                    p.display()
                );
            }
        }
        Ok(Self { paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn load(&self, image_id: &str) -> Result<AttentionStack> {
        let Some(p) = self.paths.get(image_id) else {
            bail!("no attention stack for image {image_id:?}");
        };
        read_attention_stack(open(p)?).with_context(|| format!("reading {}", p.display()))
    }
}
