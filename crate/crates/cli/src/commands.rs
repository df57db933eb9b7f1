use std::collections::HashMap;
use std::path::{Path, PathBuf};

use st_align_core::data::{
    generate_synthetic, load_slide_dir, read_table, save_slide, split_slide, write_table, GridKind, SlideDataset,
    SynthConfig, Table, COORDS_FILE, LATENTS_FILE,
};
use st_align_core::eval::{
    ablation_table, emit_spatial_map, gene_correlations, mean_std, summarize, EvalReport, DEFAULT_MARKERS,
};
use st_align_core::objectives::LossBreakdown;
use st_align_core::pipeline::{self, Ablation, ModelBundle};
use st_align_core::retrieval::{DbManifest, Weighting};
use st_align_core::train::{gradient_check, GradCheckConfig, LossTerm, TrainConfig};
use st_align_core::Matrix;

use crate::manifest::{sha256_file, slide_files, RunManifest};
use crate::{AblateArgs, CliError, CliResult, ConfigArgs, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

/// `dir/model.json` → `dir/model.<suffix>`
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn to_json_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Writes a slide plus optional latents in the standard layout.
fn write_slide(dir: &Path, slide: &SlideDataset, latents: &Matrix, manifest: &mut RunManifest) -> CliResult<()> {
    save_slide(dir, slide)?;
    let cols: Vec<String> = (0..latents.cols()).map(|j| format!("l{j}")).collect();
    write_table(&dir.join(LATENTS_FILE), &slide.spot_ids, &cols, latents)?;
    for f in slide_files(dir) {
        manifest.artifact(&f)?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs, threads: usize) -> CliResult<RunManifest> {
    if args.spots == 0 {
        return Err(CliError::Validation("--spots must be positive".into()));
    }
    let grid: GridKind = args.grid.parse()?;
    let cfg = SynthConfig {
        n_spots: args.spots,
        n_genes: args.genes,
        f_img: args.img_features,
        seed: args.seed,
        grid,
    };
    if args.holdout >= args.spots {
        return Err(CliError::Validation(format!(
            "--holdout {} leaves no training spots out of {}",
            args.holdout, args.spots
        )));
    }
    let mut manifest = RunManifest::new("synth", to_json_value(&cfg), Some(args.seed), threads);
    let out = manifest.timed("generate", || generate_synthetic(&cfg))?;
    create_dir(&args.out_dir)?;
    write_slide(&args.out_dir, &out.slide, &out.latents, &mut manifest)?;
    if args.holdout > 0 {
        let held: Vec<usize> = (args.spots - args.holdout..args.spots).collect();
        let keep: Vec<usize> = (0..args.spots - args.holdout).collect();
        let (train, query) = split_slide(&out.slide, &held)?;
        write_slide(&args.out_dir.join("train"), &train, &out.latents.select_rows(&keep), &mut manifest)?;
        write_slide(&args.out_dir.join("query"), &query, &out.latents.select_rows(&held), &mut manifest)?;
    }
    manifest.save(&args.out_dir.join("manifest.json"))?;
    eprintln!(
        "wrote {} spots × {} genes, {} image features to {}",
        cfg.n_spots,
        cfg.n_genes,
        cfg.f_img,
        args.out_dir.display()
    );
    Ok(manifest)
}

/// Defaults, then the config file, then `--set` overrides, then `--stage`.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(stage) = args.stage {
        cfg.stage = stage;
    }
    Ok(cfg)
}

fn load_slides(dirs: &[PathBuf], manifest: &mut RunManifest) -> CliResult<Vec<SlideDataset>> {
    let mut out = Vec::with_capacity(dirs.len());
    for d in dirs {
        out.push(load_slide_dir(d)?);
        for f in slide_files(d) {
            manifest.input(&f)?;
        }
    }
    Ok(out)
}

fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,total,alignment,dgi_gene,dgi_image,bottleneck\n");
    for (i, h) in history.iter().enumerate() {
        s += &format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            h.total,
            h.alignment,
            h.dgi_gene,
            h.dgi_image,
            h.bottleneck
        );
    }
    s
}

pub fn train(args: &TrainArgs, threads: usize) -> CliResult<ModelBundle> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(a) = args.ablation {
        cfg = a.apply(&cfg);
    }
    cfg.validate()?;

    let mut manifest = RunManifest::new("train", to_json_value(&cfg), Some(cfg.seed), threads);
    let slides = load_slides(&args.train_dirs, &mut manifest)?;
    let bundle = manifest.timed("fit", || pipeline::fit(&slides, &cfg))?;
    for w in &bundle.preprocessor.warnings {
        eprintln!("warning: {w}");
    }

    create_parent(&args.out_model)?;
    bundle.save(&args.out_model)?;
    let history = sibling(&args.out_model, "history.csv");
    std::fs::write(&history, history_csv(&bundle.history)).map_err(|e| CliError::io(&history, e))?;
    manifest.artifact(&args.out_model)?;
    manifest.artifact(&history)?;
    manifest.save(&sibling(&args.out_model, "manifest.json"))?;
    match bundle.history.last() {
        Some(h) => eprintln!(
            "trained {} epochs: total {:.4} (alignment {:.4}, dgi {:.4}/{:.4}, bottleneck {:.4})",
            bundle.history.len(),
            h.total,
            h.alignment,
            h.dgi_gene,
            h.dgi_image,
            h.bottleneck
        ),
        None => eprintln!("zero epochs: saved the initial parameters"),
    }
    Ok(bundle)
}

pub fn predict(args: &PredictArgs, threads: usize) -> CliResult<pipeline::Prediction> {
    let bundle = ModelBundle::load(&args.model)?;
    let k = args.topk.unwrap_or(bundle.config.topk);
    if k == 0 {
        return Err(CliError::Validation("--topk must be at least 1".into()));
    }
    let mut manifest = RunManifest::new("predict", to_json_value(&bundle.config), Some(bundle.config.seed), threads);
    manifest.input(&args.model)?;
    let db_slides = load_slides(&args.db_dirs, &mut manifest)?;
    let query = load_slides(std::slice::from_ref(&args.query_dir), &mut manifest)?.remove(0);

    let db = manifest.timed("database", || pipeline::database(&bundle, &db_slides))?;
    if k > db.len() {
        return Err(CliError::Validation(format!("--topk {k} exceeds the {} database spots", db.len())));
    }
    let pred = manifest.timed("retrieve", || pipeline::predict(&bundle, &db, &query, k, args.weighting))?;

    create_parent(&args.out)?;
    write_table(&args.out, &pred.spot_ids, &pred.gene_names, &pred.values)?;
    manifest.artifact(&args.out)?;
    if let Some(dir) = &args.save_db {
        create_dir(dir)?;
        let info = DbManifest {
            n_spots: db.len(),
            embed_dim: db.embeddings.cols(),
            n_genes: db.gene_names.len(),
            seed: bundle.config.seed,
            model_hash: sha256_file(&args.model)?,
        };
        db.save(dir, &info)?;
        for f in ["db_embeddings.csv", "db_expression.csv", "db_manifest.json"] {
            manifest.artifact(&dir.join(f))?;
        }
    }
    if let Some(path) = &args.truth_out {
        let truth = pipeline::truth(&bundle, &query)?;
        create_parent(path)?;
        write_table(path, &query.spot_ids, &pred.gene_names, &truth)?;
        manifest.artifact(path)?;
    }
    manifest.save(&sibling(&args.out, "manifest.json"))?;
    eprintln!(
        "predicted {} genes for {} query spots from {} reference spots (k = {k})",
        pred.gene_names.len(),
        pred.spot_ids.len(),
        db.len()
    );
    Ok(pred)
}

/// Rows and columns of `table` reordered to `ids` × `genes`.
fn align_table(table: &Table, what: &Path, ids: &[String], genes: &[String]) -> CliResult<Matrix> {
    let row_of: HashMap<&str, usize> = table.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let col_of: HashMap<&str, usize> = table.columns.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let missing: Vec<String> = ids.iter().filter(|id| !row_of.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(st_align_core::Error::Alignment { missing }.into());
    }
    let absent: Vec<&str> = genes.iter().map(String::as_str).filter(|g| !col_of.contains_key(g)).collect();
    if !absent.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: missing gene columns {}",
            what.display(),
            absent.join(", ")
        )));
    }
    let rows: Vec<usize> = ids.iter().map(|id| row_of[id.as_str()]).collect();
    let cols: Vec<usize> = genes.iter().map(|g| col_of[g.as_str()]).collect();
    Ok(table.values.select_rows(&rows).select_cols(&cols))
}

fn parse_map_genes(spec: &str) -> Vec<String> {
    let list = spec.strip_prefix("gene=").unwrap_or(spec);
    list.split(',').map(str::trim).filter(|g| !g.is_empty()).map(String::from).collect()
}

/// Scores `pred` against `truth`; both are already in the same space.
pub fn score(pred: &Matrix, truth: &Matrix, genes: &[String], markers: &[String]) -> CliResult<EvalReport> {
    let corr = gene_correlations(pred, truth)?;
    Ok(summarize(&corr, truth, genes, markers)?)
}

fn markers_or_default(markers: &Option<Vec<String>>) -> Vec<String> {
    markers
        .clone()
        .unwrap_or_else(|| DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect())
}

pub fn eval(args: &EvalArgs, threads: usize) -> CliResult<EvalReport> {
    let mut manifest = RunManifest::new("eval", serde_json::Value::Null, None, threads);
    let pred = read_table(&args.pred)?;
    let truth_t = read_table(&args.truth)?;
    manifest.input(&args.pred)?;
    manifest.input(&args.truth)?;
    let truth = align_table(&truth_t, &args.truth, &pred.ids, &pred.columns)?;
    let markers = markers_or_default(&args.markers);
    manifest.config = serde_json::json!({ "markers": markers });

    let map_genes: Vec<(String, usize)> = match &args.emit_maps {
        Some(spec) => parse_map_genes(spec)
            .into_iter()
            .map(|g| match pred.columns.iter().position(|c| *c == g) {
                Some(j) => Ok((g, j)),
                None => Err(CliError::Validation(format!("gene `{g}` is not among the predicted genes"))),
            })
            .collect::<CliResult<_>>()?,
        None => Vec::new(),
    };

    let report = score(&pred.values, &truth, &pred.columns, &markers)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    create_parent(&args.out_report)?;
    std::fs::write(&args.out_report, report.to_json()?).map_err(|e| CliError::io(&args.out_report, e))?;
    manifest.artifact(&args.out_report)?;

    if !map_genes.is_empty() {
        let coords_path = match &args.coords {
            Some(p) => p.clone(),
            None => args.truth.with_file_name(COORDS_FILE),
        };
        let coords_t = read_table(&coords_path)?;
        manifest.input(&coords_path)?;
        let xy = align_table(&coords_t, &coords_path, &pred.ids, &["x".into(), "y".into()])?;
        let coords: Vec<[f64; 2]> = xy.row_iter().map(|r| [r[0], r[1]]).collect();
        let dir = args.out_report.parent().map(Path::to_path_buf).unwrap_or_default();
        for (gene, j) in map_genes {
            let path = dir.join(format!("map_{gene}.svg"));
            emit_spatial_map(&coords, &pred.values.column(j), &format!("{gene} (predicted)"), &path)?;
            manifest.artifact(&path)?;
        }
    }
    manifest.save(&sibling(&args.out_report, "manifest.json"))?;
    eprintln!(
        "AG {:.4}, HVG50 {:.4}, HEG50 {:.4}, {} of {} genes above 0.3",
        report.ag,
        report.hvg50_mean,
        report.heg50_mean,
        report.count_above_0_3,
        report.per_gene_corr.len()
    );
    Ok(report)
}

/// Reports of one seed, baseline first.
#[derive(Debug, Clone)]
pub struct SeedAblation {
    pub seed: u64,
    pub reports: Vec<(String, EvalReport)>,
}

impl SeedAblation {
    pub fn ag(&self, label: &str) -> Option<f64> {
        self.reports.iter().find(|(l, _)| l == label).map(|(_, r)| r.ag)
    }
}

pub const BASELINE: &str = "Baseline";

fn variant_dir(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

/// Fits one variant, retrieves for the query and scores it.
fn run_variant(
    train: &[SlideDataset],
    query: &SlideDataset,
    cfg: &TrainConfig,
    weighting: Weighting,
    markers: &[String],
) -> CliResult<EvalReport> {
    let bundle = pipeline::fit(train, cfg)?;
    let db = pipeline::database(&bundle, train)?;
    let pred = pipeline::predict(&bundle, &db, query, cfg.topk, weighting)?;
    let truth = pipeline::truth(&bundle, query)?;
    score(&pred.values, &truth, &pred.gene_names, markers)
}

/// Runs `jobs` on at most `threads` scoped workers; results keep job order.
fn run_parallel<T: Send>(threads: usize, jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>) -> Vec<T> {
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut slots: Vec<Option<T>> = (0..jobs.len()).map(|_| None).collect();
    let mut pending: Vec<(usize, Box<dyn FnOnce() -> T + Send + '_>)> = jobs.into_iter().enumerate().collect();
    while !pending.is_empty() {
        let batch: Vec<_> = pending.drain(..threads.min(pending.len())).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = batch.into_iter().map(|(i, j)| (i, s.spawn(j))).collect();
            for (i, h) in handles {
                slots[i] = Some(h.join().expect("worker panicked"));
            }
        });
    }
    slots.into_iter().map(|s| s.expect("filled")).collect()
}

pub fn ablate(args: &AblateArgs, threads: usize) -> CliResult<Vec<SeedAblation>> {
    if args.seeds.is_empty() {
        return Err(CliError::Validation("--seeds is empty".into()));
    }
    let base = resolve_config(&args.config)?;
    base.validate()?;
    let markers = markers_or_default(&args.markers);
    let mut manifest = RunManifest::new("ablate", to_json_value(&base), None, threads);
    let train = load_slides(&args.train_dirs, &mut manifest)?;
    let query = load_slides(std::slice::from_ref(&args.query_dir), &mut manifest)?.remove(0);
    if query.expression.is_none() {
        return Err(CliError::Runtime(format!(
            "query slide {} has no expression to score against",
            query.slide_id
        )));
    }
    create_dir(&args.out_dir)?;

    let mut variants: Vec<(String, TrainConfig)> = vec![(BASELINE.to_string(), base.clone())];
    variants.extend(Ablation::ALL.iter().map(|a| (a.label().to_string(), a.apply(&base))));

    let mut out = Vec::with_capacity(args.seeds.len());
    for &seed in &args.seeds {
        let jobs: Vec<Box<dyn FnOnce() -> CliResult<EvalReport> + Send + '_>> = variants
            .iter()
            .map(|(_, cfg)| {
                let cfg = TrainConfig { seed, ..cfg.clone() };
                let (train, query, markers) = (&train, &query, &markers);
                Box::new(move || run_variant(train, query, &cfg, args.weighting, markers)) as Box<_>
            })
            .collect();
        let results = manifest.timed(&format!("seed_{seed}"), || run_parallel(threads, jobs));

        let seed_dir = args.out_dir.join(format!("seed_{seed}"));
        let mut reports = Vec::with_capacity(variants.len());
        for ((label, _), r) in variants.iter().zip(results) {
            let r = r?;
            let dir = seed_dir.join(variant_dir(label));
            create_dir(&dir)?;
            let path = dir.join("report.json");
            std::fs::write(&path, r.to_json()?).map_err(|e| CliError::io(&path, e))?;
            manifest.artifact(&path)?;
            reports.push((label.clone(), r));
        }
        let table_path = seed_dir.join("ablation_table.md");
        let table = ablation_table(&reports);
        std::fs::write(&table_path, &table).map_err(|e| CliError::io(&table_path, e))?;
        manifest.artifact(&table_path)?;
        eprintln!("seed {seed}\n{table}");
        out.push(SeedAblation { seed, reports });
    }

    let summary_path = args.out_dir.join("ablation_summary.md");
    std::fs::write(&summary_path, ag_summary(&out)).map_err(|e| CliError::io(&summary_path, e))?;
    manifest.artifact(&summary_path)?;
    manifest.save(&args.out_dir.join("manifest.json"))?;
    Ok(out)
}

/// AG mean ± sample standard deviation per variant across seeds.
pub fn ag_summary(runs: &[SeedAblation]) -> String {
    let mut s = String::from("| Variant | AG mean | AG sd | seeds |\n|---|---|---|---|\n");
    let Some(first) = runs.first() else { return s };
    for (label, _) in &first.reports {
        let ags: Vec<f64> = runs.iter().filter_map(|r| r.ag(label)).collect();
        let (m, sd) = mean_std(&ags);
        s += &format!("| {label} | {m:.4} | {sd:.4} | {} |\n", ags.len());
    }
    s
}

/// Outcome for one seed and term.
#[derive(Debug, Clone)]
pub struct GradcheckLine {
    pub seed: u64,
    pub term: LossTerm,
    pub worst_block: String,
    pub worst: f64,
    pub passed: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckLine>> {
    if args.sweep == 0 {
        return Err(CliError::Validation("--sweep must be at least 1".into()));
    }
    let objective = resolve_config(&args.config)?.objective();
    let terms: Vec<LossTerm> = match args.term {
        Some(t) => vec![t],
        None => LossTerm::ALL.to_vec(),
    };
    let mut lines = Vec::new();
    for seed in args.seed..args.seed + args.sweep {
        let mut seed_lines = Vec::new();
        for &term in &terms {
            let r = gradient_check(&GradCheckConfig {
                seed,
                objective,
                term,
                corrupt_block: args.corrupt.clone(),
                ..Default::default()
            })?;
            let (block, worst) = r
                .blocks
                .iter()
                .cloned()
                .fold((String::new(), 0.0), |acc, b| if b.1 > acc.1 { b } else { acc });
            seed_lines.push(GradcheckLine {
                seed,
                term,
                worst_block: block,
                worst,
                passed: r.passes(args.tol),
            });
        }
        let ok = seed_lines.iter().all(|l| l.passed);
        let detail: Vec<String> = seed_lines
            .iter()
            .map(|l| format!("{} {:.2e} ({})", l.term.name(), l.worst, l.worst_block))
            .collect();
        println!(
            "seed {seed}: {} worst relative error {:.2e} (tol {:.0e}); {}",
            if ok { "PASS" } else { "FAIL" },
            seed_lines.iter().map(|l| l.worst).fold(0.0, f64::max),
            args.tol,
            detail.join(", ")
        );
        lines.extend(seed_lines);
    }
    Ok(lines)
}
