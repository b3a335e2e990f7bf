//! JSON-lines streams: one record per line, blank lines ignored.
//!
//! * proposals: `{"image_id": "...", "proposals": [{"label": "...", "score": 0.9}]}`
//! * detections: `{"image_id": "...", "label": "...", "box": [x0, y0, x1, y1], "score": 0.7}`
//! * transcripts: `{"image_id": "...", "kind": "choice" | "score" | "yesno", "label": "...", "response": "..."}`

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, W, I>(mut sink: W, records: I) -> Result<usize>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    let mut n = 0;
    for rec in records {
        serde_json::to_writer(&mut sink, rec)?;
        sink.write_all(b"\n")?;
        n += 1;
    }
    sink.flush()?;
    Ok(n)
}
