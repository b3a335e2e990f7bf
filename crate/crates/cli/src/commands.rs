use std::collections::HashMap;
use std::fs;
use std::io::Write;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use nada_core::dataio::{
    builtin_vocabulary, load_manifest, read_embedding_matrix, records, synth_fixture,
    write_attention_stack, DatasetManifest, FixtureSpec,
};
use nada_core::evalkit::{classification_metrics, detection_ap50, Detection, EvalReport};
use nada_core::pipeline::{detect_image_multi, sweep_thresholds, DetectOptions, ImageDetections};
use nada_core::promptgen::{
    build_vlm_query, caption_prompt, remap_label, template_prompt, LabelRemapTable, PromptSpec,
};
use nada_core::proposer::{
    clip_propose, oracle_propose, read_checkpoint, select_labels, write_checkpoint, wscp_infer,
    wscp_train, yesno_propose, zscp_parse_choice, zscp_parse_score, ProposalSet, QueryKind,
    TrainConfig, VlmTranscript,
};
use nada_core::segbox::{ExtractionConfig, ThresholdMode};
use rayon::prelude::*;
use serde_json::json;

use crate::io::{open, read_records, sink, Paths, StackIndex};
use crate::{
    Cli, Command, DetectArgs, DetectConfigArgs, EvalArgs, FixturesArgs, Preset, PromptModeArg,
    PromptsArgs, ProposeArgs, ProposerKind, QueriesArgs, SweepArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let paths = Paths::new(cli.data_dir);
    match cli.command {
        Command::Fixtures(a) => fixtures(&paths, a),
        Command::Propose(a) => propose(&paths, a),
        Command::Train(a) => train(&paths, a),
        Command::Detect(a) => detect(&paths, a),
        Command::Eval(a) => eval(&paths, a),
        Command::Sweep(a) => sweep(&paths, a),
        Command::Prompts(a) => prompts(&paths, a),
        Command::Queries(a) => queries(&paths, a),
    }
}

fn vocabulary(name: &str) -> Result<Vec<String>> {
    let v = builtin_vocabulary(name)
        .with_context(|| format!("unknown vocabulary {name:?} (expected artdl or iconart)"))?;
    Ok(v.iter().map(|s| s.to_string()).collect())
}

fn remap_table(paths: &Paths, arg: Option<&str>) -> Result<LabelRemapTable> {
    Ok(match arg {
        None => LabelRemapTable::identity(),
        Some("iconart") => LabelRemapTable::iconart(),
        Some(p) => {
            let p = paths.resolve(p.as_ref());
            LabelRemapTable::load(&p).with_context(|| format!("reading {}", p.display()))?
        }
    })
}

fn manifest(paths: &Paths, p: &std::path::Path) -> Result<DatasetManifest> {
    let p = paths.resolve(p);
    load_manifest(&p).with_context(|| format!("reading {}", p.display()))
}

fn fixtures(paths: &Paths, a: FixturesArgs) -> Result<()> {
    let spec = FixtureSpec {
        images: a.images as usize,
        min_blobs: a.min_blobs,
        max_blobs: a.max_blobs,
        grid: (a.grid, a.grid),
        image: (a.image_size, a.image_size),
        classes: vocabulary(&a.vocabulary)?,
        timesteps: a.timesteps,
        blocks: a.blocks,
        noise: a.noise,
        seed: a.seed,
    };
    let fixture = synth_fixture(spec)?;
    let out = paths.resolve(&a.out);
    let stack_dir = out.join("stacks");
    fs::create_dir_all(&stack_dir).with_context(|| format!("creating {}", stack_dir.display()))?;

    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, fixture.manifest().to_json()?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", manifest_path.display())?;
    for (i, record) in fixture.manifest().images.iter().enumerate() {
        let path = stack_dir.join(format!("{}.nada", record.id));
        let mut w = sink(Some(&path))?;
        let bytes = write_attention_stack(&fixture.stack(i)?, &mut w)?;
        w.flush()?;
        writeln!(stdout, "{}\t{bytes}", path.display())?;
    }
    info!("wrote {} stacks and a manifest to {}", fixture.len(), out.display());
    Ok(())
}

fn transcripts_by_image(paths: &Paths, a: &ProposeArgs) -> Result<HashMap<String, Vec<VlmTranscript>>> {
    let p = a
        .transcripts
        .as_ref()
        .context("this proposer needs --transcripts")?;
    let mut by_image: HashMap<String, Vec<VlmTranscript>> = HashMap::new();
    for t in read_records::<VlmTranscript>(&paths.resolve(p))? {
        by_image.entry(t.image_id.clone()).or_default().push(t);
    }
    Ok(by_image)
}

fn check_kinds(by_image: &HashMap<String, Vec<VlmTranscript>>, kind: QueryKind) -> Result<()> {
    for ts in by_image.values() {
        if let Some(t) = ts.iter().find(|t| t.kind != kind) {
            bail!(
                "transcript for {:?} has kind {:?}, but the proposer expects {:?}",
                t.image_id,
                t.kind,
                kind
            );
        }
    }
    Ok(())
}

fn propose(paths: &Paths, a: ProposeArgs) -> Result<()> {
    ensure!((0.0..=1.0).contains(&a.tau), "--tau must lie in [0, 1]");
    ensure!((-1.0..=1.0).contains(&a.similarity), "--similarity must lie in [-1, 1]");
    let m = manifest(paths, &a.manifest)?;
    let mut warnings = 0usize;
    let sets: Vec<ProposalSet> = match a.kind {
        ProposerKind::Oracle => m.images.iter().map(oracle_propose).collect(),
        ProposerKind::Wscp => {
            let emb_path = paths.resolve(a.embeddings.as_ref().context("wscp needs --embeddings")?);
            let ckpt = paths.resolve(a.checkpoint.as_ref().context("wscp needs --checkpoint")?);
            let emb = read_embedding_matrix(open(&emb_path)?)?;
            let model = read_checkpoint(open(&ckpt)?)
                .with_context(|| format!("reading {}", ckpt.display()))?;
            m.images
                .iter()
                .map(|img| {
                    let row = emb
                        .get(&img.id)
                        .with_context(|| format!("no embedding for image {:?}", img.id))?;
                    let scores = wscp_infer(&model, row)?;
                    Ok(select_labels(&img.id, &scores, &model.classes, model.head, a.threshold))
                })
                .collect::<Result<_>>()?
        }
        ProposerKind::Clip => {
            let emb_path = paths.resolve(a.embeddings.as_ref().context("clip needs --embeddings")?);
            let text_path = paths.resolve(
                a.text_embeddings
                    .as_ref()
                    .context("clip needs --text-embeddings")?,
            );
            let emb = read_embedding_matrix(open(&emb_path)?)?;
            let text = read_embedding_matrix(open(&text_path)?)?;
            m.images
                .iter()
                .map(|img| {
                    let row = emb
                        .get(&img.id)
                        .with_context(|| format!("no embedding for image {:?}", img.id))?;
                    Ok(clip_propose(&img.id, row, &text, &m.classes, a.similarity)?)
                })
                .collect::<Result<_>>()?
        }
        ProposerKind::ZscpChoice | ProposerKind::ZscpScore => {
            let by_image = transcripts_by_image(paths, &a)?;
            let kind = if a.kind == ProposerKind::ZscpChoice {
                QueryKind::Choice
            } else {
                QueryKind::Score
            };
            check_kinds(&by_image, kind)?;
            let mut sets = Vec::with_capacity(m.images.len());
            for img in &m.images {
                let ts = by_image.get(&img.id).map(Vec::as_slice).unwrap_or_default();
                if ts.len() > 1 {
                    warn!("{} answers for {:?}; using the first", ts.len(), img.id);
                    warnings += 1;
                }
                let set = match ts.first() {
                    None => ProposalSet::empty(img.id.clone()),
                    Some(t) if kind == QueryKind::Choice => zscp_parse_choice(t, &m.classes),
                    Some(t) => zscp_parse_score(t, &m.classes, a.tau).unwrap_or_else(|e| {
                        warn!("unparseable answer for {:?}: {e}", img.id);
                        warnings += 1;
                        ProposalSet::empty(img.id.clone())
                    }),
                };
                sets.push(set);
            }
            sets
        }
        ProposerKind::Yesno => {
            let by_image = transcripts_by_image(paths, &a)?;
            check_kinds(&by_image, QueryKind::YesNo)?;
            m.images
                .iter()
                .map(|img| {
                    let ts = by_image.get(&img.id).map(Vec::as_slice).unwrap_or_default();
                    let (set, ignored) = yesno_propose(&img.id, ts, &m.classes);
                    if ignored > 0 {
                        warn!("{ignored} answers for {:?} name no known class", img.id);
                        warnings += ignored;
                    }
                    set
                })
                .collect()
        }
    };
    let out = a.out.as_ref().map(|p| paths.resolve(p));
    let mut w = sink(out.as_deref())?;
    records::write_jsonl(&mut w, &sets)?;
    w.flush()?;
    let proposed: usize = sets.iter().map(ProposalSet::len).sum();
    info!(
        "proposed {proposed} labels over {} images ({warnings} warnings)",
        sets.len()
    );
    Ok(())
}

fn train(paths: &Paths, a: TrainArgs) -> Result<()> {
    let m = manifest(paths, &a.manifest)?;
    let emb = read_embedding_matrix(open(&paths.resolve(&a.embeddings))?)?;
    let mut config = match a.preset {
        Preset::Artdl => TrainConfig::artdl(),
        Preset::Iconart => TrainConfig::iconart(),
    };
    config.seed = a.seed;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = a.hidden {
        config.hidden = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    let outcome = wscp_train(&emb, &m, &config)?;
    let out = paths.resolve(&a.out);
    let mut w = sink(Some(&out))?;
    let bytes = write_checkpoint(&outcome.model, &mut w)?;
    w.flush()?;
    info!(
        "trained {:?} for {} epochs, final loss {:.6}; wrote {} bytes to {}",
        outcome.model.dims(),
        config.epochs,
        outcome.final_loss,
        bytes,
        out.display()
    );
    Ok(())
}

fn detect_options(paths: &Paths, c: &DetectConfigArgs) -> Result<DetectOptions> {
    let extraction = ExtractionConfig {
        threshold: c.threshold,
        min_region_area: c.min_region_area,
        marker_min_distance: c.marker_distance,
        normalize: !c.no_normalize,
    };
    extraction.validate()?;
    Ok(DetectOptions {
        extraction,
        uniform_scores: c.uniform_scores,
        remap: remap_table(paths, c.remap.as_deref())?,
    })
}

/// Proposal sets in manifest order; images without a set propose nothing.
fn proposals_in_order(m: &DatasetManifest, sets: Vec<ProposalSet>) -> Result<Vec<ProposalSet>> {
    let mut ordered: Vec<Option<ProposalSet>> = vec![None; m.images.len()];
    for set in sets {
        let i = m
            .image_index(&set.image_id)
            .with_context(|| format!("proposals for unknown image {:?}", set.image_id))?;
        set.validate(&m.classes)
            .with_context(|| format!("proposals for {:?}", set.image_id))?;
        ensure!(ordered[i].is_none(), "two proposal sets for {:?}", set.image_id);
        ordered[i] = Some(set);
    }
    Ok(ordered
        .into_iter()
        .zip(&m.images)
        .map(|(s, img)| s.unwrap_or_else(|| ProposalSet::empty(img.id.clone())))
        .collect())
}

/// Runs every configuration on each image and hands the results to `emit` in
/// manifest order. Only a bounded chunk of stacks is held in memory.
fn run_images(
    m: &DatasetManifest,
    stacks: &StackIndex,
    proposals: &[ProposalSet],
    configs: &[ExtractionConfig],
    options: &DetectOptions,
    jobs: usize,
    mut emit: impl FnMut(Vec<ImageDetections>) -> Result<()>,
) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("starting worker pool")?;
    let indices: Vec<usize> = (0..m.images.len()).collect();
    for chunk in indices.chunks(jobs * 2) {
        let results: Vec<Result<Vec<ImageDetections>>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&i| {
                    let record = &m.images[i];
                    let props = &proposals[i];
                    if props.is_empty() {
                        return Ok(configs
                            .iter()
                            .map(|_| ImageDetections {
                                image_id: record.id.clone(),
                                ..Default::default()
                            })
                            .collect());
                    }
                    let stack = stacks.load(&record.id)?;
                    Ok(detect_image_multi(&stack, record, props, configs, options)?)
                })
                .collect()
        });
        for r in results {
            emit(r?)?;
        }
    }
    Ok(())
}

fn load_detection_inputs(
    paths: &Paths,
    manifest_path: &std::path::Path,
    stacks_path: &std::path::Path,
    proposals_path: &std::path::Path,
) -> Result<(DatasetManifest, StackIndex, Vec<ProposalSet>)> {
    let m = manifest(paths, manifest_path)?;
    let stacks = StackIndex::scan(&paths.resolve(stacks_path))?;
    let sets = read_records::<ProposalSet>(&paths.resolve(proposals_path))?;
    let proposals = proposals_in_order(&m, sets)?;
    Ok((m, stacks, proposals))
}

fn detect(paths: &Paths, a: DetectArgs) -> Result<()> {
    let options = detect_options(paths, &a.config)?;
    let (m, stacks, proposals) = load_detection_inputs(paths, &a.manifest, &a.stacks, &a.proposals)?;
    let out = a.out.as_ref().map(|p| paths.resolve(p));
    let mut w = sink(out.as_deref())?;
    let (mut detections, mut missing) = (0usize, 0usize);
    run_images(
        &m,
        &stacks,
        &proposals,
        std::slice::from_ref(&options.extraction),
        &options,
        a.config.jobs as usize,
        |mut results| {
            let r = results.pop().expect("one configuration");
            for label in &r.missing_spans {
                warn!("stack of {:?} has no span for {label:?}; skipped", r.image_id);
            }
            missing += r.missing_spans.len();
            detections += r.detections.len();
            records::write_jsonl(&mut w, &r.detections)?;
            Ok(())
        },
    )?;
    w.flush()?;
    info!(
        "{} images, {} stacks indexed, {detections} detections, {missing} missing spans",
        m.images.len(),
        stacks.len()
    );
    Ok(())
}

fn eval(paths: &Paths, a: EvalArgs) -> Result<()> {
    ensure!(
        a.detections.is_some() || a.proposals.is_some(),
        "give --detections, --proposals, or both"
    );
    let m = manifest(paths, &a.manifest)?;
    let mut report = EvalReport::default();
    if let Some(p) = &a.detections {
        let dets: Vec<Detection> = read_records(&paths.resolve(p))?;
        report.detection = Some(detection_ap50(&dets, &m)?);
    }
    if let Some(p) = &a.proposals {
        let sets: Vec<ProposalSet> = read_records(&paths.resolve(p))?;
        report.classification = Some(classification_metrics(&sets, &m)?);
    }
    print!("{}", report.render_table());
    if let Some(p) = &a.json {
        let p = paths.resolve(p);
        let mut w = sink(Some(&p))?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }
    Ok(())
}

fn threshold_name(t: ThresholdMode) -> String {
    match t {
        ThresholdMode::Otsu => "otsu".into(),
        ThresholdMode::Fixed(v) => format!("{v:.1}"),
    }
}

fn sweep(paths: &Paths, a: SweepArgs) -> Result<()> {
    let options = detect_options(paths, &a.config)?;
    let (m, stacks, proposals) = load_detection_inputs(paths, &a.manifest, &a.stacks, &a.proposals)?;
    let modes = sweep_thresholds();
    let configs: Vec<ExtractionConfig> = modes
        .iter()
        .map(|&t| options.extraction.with_threshold(t))
        .collect();
    let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); configs.len()];
    let mut foreground = vec![0usize; configs.len()];
    run_images(
        &m,
        &stacks,
        &proposals,
        &configs,
        &options,
        a.config.jobs as usize,
        |results| {
            for (k, r) in results.into_iter().enumerate() {
                foreground[k] += r.foreground.iter().map(|f| f.cells).sum::<usize>();
                detections[k].extend(r.detections);
            }
            Ok(())
        },
    )?;
    let mut json = match &a.json {
        Some(p) => Some(sink(Some(&paths.resolve(p)))?),
        None => None,
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:>9}  {:>8}  {:>10}  {:>11}", "threshold", "AP50", "detections", "foreground")?;
    for (k, mode) in modes.iter().enumerate() {
        let report = detection_ap50(&detections[k], &m)?;
        let name = threshold_name(*mode);
        writeln!(
            stdout,
            "{:>9}  {:>8.4}  {:>10}  {:>11}",
            name,
            report.macro_ap50,
            detections[k].len(),
            foreground[k]
        )?;
        if let Some(w) = json.as_mut() {
            let row = json!({
                "threshold": name,
                "macro_ap50": report.macro_ap50,
                "detections": detections[k].len(),
                "foreground_cells": foreground[k],
            });
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
        }
    }
    if let Some(mut w) = json {
        w.flush()?;
    }
    Ok(())
}

fn prompts(paths: &Paths, a: PromptsArgs) -> Result<()> {
    let m = manifest(paths, &a.manifest)?;
    let table = remap_table(paths, a.remap.as_deref())?;
    let labels: Vec<(String, Vec<String>)> = match &a.proposals {
        Some(p) => {
            let sets = proposals_in_order(&m, read_records(&paths.resolve(p))?)?;
            sets.into_iter()
                .map(|s| (s.image_id, s.proposals.into_iter().map(|p| p.label).collect()))
                .collect()
        }
        None => m
            .images
            .iter()
            .map(|img| (img.id.clone(), img.gt_labels.clone()))
            .collect(),
    };
    // (image, label) -> (caption, token start)
    let mut captions: HashMap<(String, String), (String, Option<usize>)> = HashMap::new();
    if a.mode == PromptModeArg::Caption {
        let p = a.captions.as_ref().context("caption mode needs --captions")?;
        for (line, v) in read_records::<serde_json::Value>(&paths.resolve(p))?
            .into_iter()
            .enumerate()
        {
            let field = |k: &str| v.get(k).and_then(|x| x.as_str()).map(str::to_string);
            let (Some(image), Some(label), Some(caption)) =
                (field("image_id"), field("label"), field("caption"))
            else {
                bail!("caption record {} needs image_id, label and caption", line + 1);
            };
            let start = v
                .get("token_start")
                .and_then(|x| x.as_u64())
                .map(|x| x as usize);
            captions.insert((image, label), (caption, start));
        }
    }
    let out = a.out.as_ref().map(|p| paths.resolve(p));
    let mut w = sink(out.as_deref())?;
    let mut fallbacks = 0usize;
    for (image, labels) in labels {
        for label in labels {
            let rendered = remap_label(&label, &table);
            let spec: PromptSpec = match a.mode {
                PromptModeArg::Template => template_prompt(rendered),
                PromptModeArg::Caption => {
                    let (caption, start) = captions
                        .get(&(image.clone(), label.clone()))
                        .with_context(|| format!("no caption for {image:?} / {label:?}"))?;
                    caption_prompt(caption, rendered, a.budget, *start)
                }
            };
            fallbacks += spec.fallback as usize;
            let rec = json!({ "image_id": image, "label": label, "prompt": spec });
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    if a.mode == PromptModeArg::Caption {
        info!("{fallbacks} captions fell back to the template prompt");
    }
    Ok(())
}

fn queries(paths: &Paths, a: QueriesArgs) -> Result<()> {
    let vocab = match &a.manifest {
        Some(p) => manifest(paths, p)?.classes,
        None => vocabulary(&a.vocabulary)?,
    };
    let qs = build_vlm_query(&vocab, a.kind)?;
    let out = a.out.as_ref().map(|p| paths.resolve(p));
    let mut w = sink(out.as_deref())?;
    records::write_jsonl(&mut w, &qs)?;
    w.flush()?;
    Ok(())
}
