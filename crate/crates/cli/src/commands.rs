use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use vsa::bias::bias_report as learned_bias;
use vsa::cluster::{cache_centers, class_means, export_csv, map_objects, purity, ClusterSummary};
use vsa::concept::{ConceptError, ConceptSpace, DebiasSpace, JudgeMode};
use vsa::dataset::{build_dataset, load_dataset, save_dataset, Dataset, DatasetError, DatasetSpec};
use vsa::eval::{evaluate, evaluate_oracle, EvalReport};
use vsa::executor::ExecError;
use vsa::probe::probe_drop;
use vsa::program::{Constraints, QType, QTypeMix};
use vsa::scene::{make_universe, palette_violations, BiasCondition, Perturbation, Universe, UniverseConfig};
use vsa::trainer::{run_curriculum, Ablation, CurriculumConfig, TrainError};

use crate::{
    AblateArg, BiasArgs, CentersArg, ClusterArgs, DebiasSpaceArg, EvalArgs, GenerateArgs, ModeArg, OnOff, PrintConfigArgs, TrainArgs,
};

/// Marks the stage an error came from, for the exit code.
#[derive(Debug)]
struct Stage(u8, &'static str);

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.1)
    }
}

impl std::error::Error for Stage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(Stage(code, _)) = e.downcast_ref::<Stage>() {
        return *code;
    }
    let concept_state =
        |c: &ConceptError| matches!(c, ConceptError::NotFrozen | ConceptError::AlreadyFrozen | ConceptError::FreezeAborted { .. });
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            match t {
                TrainError::ThetaDrift { .. } | TrainError::Gate(_) => return 4,
                TrainError::Concept(c) if concept_state(c) => return 4,
                TrainError::Exec(ExecError::State(_)) => return 4,
                _ => {}
            }
        }
        if cause.downcast_ref::<ConceptError>().is_some_and(concept_state) {
            return 4;
        }
        if matches!(cause.downcast_ref::<ExecError>(), Some(ExecError::State(_))) {
            return 4;
        }
    }
    2
}

fn ablation(a: AblateArg) -> Ablation {
    match a {
        AblateArg::None => Ablation::None,
        AblateArg::NoCc => Ablation::NoCc,
        AblateArg::NoSl => Ablation::NoSl,
        AblateArg::NoAbs => Ablation::NoAbs,
    }
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// JSON to `--report` when given, otherwise to stdout.
fn emit(report: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match report {
        Some(p) => {
            write_atomic(p, &text)?;
            info!("wrote {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_data(dir: &Path) -> Result<(Universe, Dataset)> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_ckpt(path: &Path) -> Result<ConceptSpace> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ConceptSpace::from_json(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn parse_condition(s: &str) -> Result<BiasCondition> {
    Ok(s.parse::<BiasCondition>()?)
}

#[derive(Serialize)]
struct ProbeLine {
    attr: String,
    rho: f64,
    clean: f64,
    perturbed: f64,
    drop: f64,
}

#[derive(Serialize)]
struct GenerateSummary {
    out: String,
    condition: BiasCondition,
    scenes: usize,
    questions: usize,
    per_qtype: BTreeMap<QType, usize>,
    palette_violations: usize,
    /// Linear-probe accuracy on clean vs perturbed objects, as a scale for rho.
    probe: Vec<ProbeLine>,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let condition = parse_condition(&a.condition)?;
    let universe = match &a.universe {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Universe::from_json(&text)?
        }
        None => {
            let mut cfg = UniverseConfig::default();
            if let Some(s) = a.noise_sigma {
                cfg.noise_sigma = s;
            }
            make_universe(a.universe_seed, cfg)?
        }
    };
    let schema = &universe.schema;
    let mut perturb = Vec::new();
    for p in &a.perturb {
        let (name, rho) = p.split_once(':').with_context(|| format!("--perturb {p:?}: expected attr:rho"))?;
        let rho: f64 = rho.parse().with_context(|| format!("--perturb {p:?}: bad rho"))?;
        if !(0.0..=1.0).contains(&rho) {
            bail!("--perturb {p:?}: rho must lie in [0, 1]");
        }
        perturb.push(Perturbation { attr: schema.lookup_attr(name)?, rho });
    }
    let forbidden_attrs = a.forbid.iter().map(|n| schema.lookup_attr(n)).collect::<Result<Vec<_>, _>>()?;
    let mix = if a.qtypes.is_empty() {
        QTypeMix::default()
    } else {
        QTypeMix(a.qtypes.iter().map(|q| Ok((q.parse::<QType>()?, 1.0))).collect::<Result<Vec<_>>>()?)
    };
    let spec = DatasetSpec {
        condition,
        scenes: a.scenes,
        questions_per_scene: a.questions_per_scene,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        constraints: Constraints { forbidden_attrs, max_depth: a.max_depth, ..Default::default() },
        mix,
        perturb: perturb.clone(),
        seed: a.seed,
        id_offset: a.id_offset,
    };
    let data = build_dataset(&universe, &spec).map_err(|e| match e {
        DatasetError::Spec(_) => anyhow::Error::new(e),
        other => anyhow::Error::new(other).context(Stage(3, "scene generation failed")),
    })?;
    save_dataset(&a.out, &universe, &data)?;
    let mut per_qtype = BTreeMap::new();
    for s in &data.samples {
        *per_qtype.entry(s.qtype).or_insert(0) += 1;
    }
    let probe = perturb
        .iter()
        .map(|p| {
            let r = probe_drop(&universe, p.attr, p.rho, 2000, 2000, a.seed);
            ProbeLine { attr: schema.attr_name(p.attr).to_string(), rho: p.rho, clean: r.clean, perturbed: r.perturbed, drop: r.drop() }
        })
        .collect();
    let summary = GenerateSummary {
        out: a.out.display().to_string(),
        condition,
        scenes: data.scenes.len(),
        questions: data.len(),
        per_qtype,
        palette_violations: data.scenes.iter().map(|s| palette_violations(&universe, s, condition)).sum(),
        probe,
    };
    info!("{} scenes, {} questions written to {}", summary.scenes, summary.questions, a.out.display());
    emit(a.report.as_deref(), &summary)
}

fn resolve_config(path: Option<&Path>, ablate: AblateArg, seed: Option<u64>) -> Result<CurriculumConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => CurriculumConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.ablate(ablation(ablate));
    cfg.validate()?;
    Ok(cfg)
}

/// Splits off trailing scenes holding at least `n` questions.
fn hold_out(data: &Dataset, n: usize) -> (Dataset, Dataset) {
    let mut held = std::collections::HashSet::new();
    let mut count = 0;
    for s in data.scenes.iter().rev() {
        if count >= n {
            break;
        }
        held.insert(s.scene_id);
        count += data.samples.iter().filter(|q| q.scene_id == s.scene_id).count();
    }
    (data.filtered(|q| !held.contains(&q.scene_id)), data.filtered(|q| held.contains(&q.scene_id)))
}

fn same_universe(a: &Universe, b: &Universe, path: &Path) -> Result<()> {
    if a.mixer != b.mixer || a.latents != b.latents || a.schema != b.schema {
        bail!("dataset {} comes from a different universe", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    report: String,
    config_hash: String,
    checkpoint_hash: String,
    best_epoch: Option<usize>,
    val_accuracy: Option<f64>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), a.ablate, a.seed)?;
    let (first, rest) = a.data.split_first().context("--data names no dataset")?;
    let (universe, mut data) = load_data(first)?;
    for p in rest {
        let (u, d) = load_data(p)?;
        same_universe(&universe, &u, p)?;
        data = data.merged(&d).with_context(|| format!("merging {}", p.display()))?;
    }
    let (train, val) = match &a.val {
        Some(p) => {
            let (vu, val) = load_data(p)?;
            same_universe(&universe, &vu, p)?;
            (data, val)
        }
        // Small sets keep at least four fifths of their questions for training.
        None => hold_out(&data, cfg.val_size.min(data.len() / 5)),
    };
    info!("training on {} questions, validating on {}", train.len(), val.len().min(cfg.val_size));
    let report_path = a.report.clone().unwrap_or_else(|| PathBuf::from(format!("{}.report.json", a.out.display())));
    let mut write_err = None;
    let (space, report) = run_curriculum(&cfg, &universe.schema, &train, &val, &mut |r, s| {
        let res = write_atomic(&a.out, &s.to_json()).and_then(|_| write_atomic(&report_path, &serde_json::to_string_pretty(r)?));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    })
    .map_err(anyhow::Error::new)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let cfg_path = PathBuf::from(format!("{}.config.json", a.out.display()));
    write_atomic(&cfg_path, &cfg.to_json())?;
    let summary = TrainSummary {
        checkpoint: a.out.display().to_string(),
        report: report_path.display().to_string(),
        config_hash: report.config_hash.clone(),
        checkpoint_hash: space.full_hash(),
        best_epoch: report.best_epoch,
        val_accuracy: report.epochs.last().map(|e| e.val_accuracy),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn resolve_mode(space: &ConceptSpace, mode: ModeArg, debias: OnOff) -> Result<JudgeMode> {
    let populated = space.schema().concepts().any(|c| space.cache.is_active(c, space.judgment().cache_min));
    let base = match mode {
        ModeArg::Auto if !space.is_frozen() => {
            if debias == OnOff::On {
                warn!("checkpoint has no frozen hierarchy; evaluating the mixture judgment without debiasing");
            }
            return Ok(JudgeMode::MIXTURE);
        }
        ModeArg::Auto if populated => JudgeMode::CLUSTERED,
        ModeArg::Auto | ModeArg::Super => JudgeMode::SUPER,
        ModeArg::Clustered => JudgeMode::CLUSTERED,
        ModeArg::Mixture => {
            if debias == OnOff::On {
                bail!("debiasing applies to exclusive judgments; pass --debias off with --mode mixture");
            }
            return Ok(JudgeMode::MIXTURE);
        }
    };
    Ok(base.with_debias(debias == OnOff::On))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (universe, data) = load_data(&a.data)?;
    let report: EvalReport = if a.oracle {
        evaluate_oracle(&data, &universe.schema)?
    } else {
        let mut space = load_ckpt(a.ckpt.as_deref().expect("clap requires --ckpt"))?;
        let mut j = *space.judgment();
        if let Some(x) = a.alpha {
            j.alpha = x;
        }
        if let Some(x) = a.lambda {
            j.lambda = x;
        }
        space.set_judgment(j);
        match a.debias_space {
            Some(DebiasSpaceArg::Probability) => space.set_debias_space(DebiasSpace::Probability),
            Some(DebiasSpaceArg::Logit) => space.set_debias_space(DebiasSpace::Logit),
            None => {}
        }
        let mode = resolve_mode(&space, a.mode, a.debias)?;
        let mut r = evaluate(&space, mode, &data)?;
        r.checkpoint_hash = Some(space.full_hash());
        r
    };
    let mut report = report;
    report.dataset.name = Some(a.data.display().to_string());
    eprintln!("{}", EvalReport::table_header());
    eprintln!("{}", report.table_row());
    emit(a.report.as_deref(), &report)
}

pub fn bias_report(a: BiasArgs) -> Result<()> {
    let space = load_ckpt(&a.ckpt)?;
    let condition = parse_condition(&a.condition)?;
    let heads = if a.heads == "all" {
        None
    } else {
        let (x, y) = a.heads.split_once(':').with_context(|| format!("--heads {:?}: expected all or src:dst", a.heads))?;
        let schema = space.schema();
        let h = space.head_index(schema.lookup_attr(x)?, schema.lookup_attr(y)?).with_context(|| format!("no shortcut head {x}->{y}"))?;
        Some(vec![h])
    };
    let report = learned_bias(&space, condition, heads.as_deref())?;
    for h in &report.heads {
        eprintln!("{}: max |learned - injected| = {:.3}", h.head, h.max_abs_deviation);
    }
    emit(a.report.as_deref(), &report)
}

pub fn cluster_export(a: ClusterArgs) -> Result<()> {
    let space = load_ckpt(&a.ckpt)?;
    let attr = space.schema().lookup_attr(&a.superordinate).with_context(|| format!("unknown superordinate {:?}", a.superordinate))?;
    let (_, data) = load_data(&a.data)?;
    let objects = map_objects(&space, &data, attr);
    let (centers, label) = match a.centers {
        CentersArg::Cache => {
            let c = cache_centers(&space, attr);
            if c.is_empty() {
                bail!("the checkpoint has no quasi-centers for {}", a.superordinate);
            }
            (c, "cache".to_string())
        }
        CentersArg::Means => match &a.reference {
            Some(p) => {
                let (_, r) = load_data(p)?;
                (class_means(&map_objects(&space, &r, attr)), format!("means of {}", p.display()))
            }
            None => (class_means(&objects), "means of the exported set".to_string()),
        },
    };
    write_atomic(&a.out, &export_csv(&space, &objects, a.with_mapped))?;
    let summary = ClusterSummary {
        superordinate: a.superordinate.clone(),
        objects: objects.len(),
        centers: label,
        purity: purity(&objects, &centers),
    };
    eprintln!("{} objects, purity {:.4}", summary.objects, summary.purity);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct ResolvedConfig {
    training: CurriculumConfig,
    universe: UniverseConfig,
    config_hash: String,
}

pub fn print_config(a: PrintConfigArgs) -> Result<()> {
    let training = resolve_config(a.config.as_deref(), a.ablate, None)?;
    let config_hash = training.hash();
    let out = ResolvedConfig { training, universe: UniverseConfig::default(), config_hash };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
