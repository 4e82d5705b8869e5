use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moekit::baselines::{
    apply_prune, f_prune, msmoe_group, o_prune, s_prune, OPruneBudget, OPruneObjective, OPruneOptions,
};
use moekit::calibration::{collect_stats, CalibrationOptions, CalibrationStats};
use moekit::clustering::{non_uniform_budgets, ClusterAssignment, FeatureMatrix, Linkage, RouterFeature};
use moekit::evaluation::{
    fcm_merge_eval, model_jensen_slack, opt_partition_oracle, output_fidelity, partition_cost, stirling2, LayerQuality,
    QualityReport,
};
use moekit::io::{
    attach_activations, load_activations, load_batch, load_checkpoint, save_activations, save_batch, save_checkpoint,
    ArchDims, ParamReport, ReportDoc,
};
use moekit::merging::{FixDomFeatures, MergeStrategy};
use moekit::pipeline::{cluster_features, cluster_model, merge_model, Algorithm, ClusterConfig, FeatureSource};
use moekit::synth::{gen_batch, gen_planted_model, parse_key_values, PlantedSpec};
use moekit::MoeModel;
use serde_json::json;

use super::{
    CalibrateArgs, ClusterArgs, EvalArgs, FixDomArg, GenArgs, LinkageArg, MergeArgs, MethodArg, MetricArg, OracleArgs,
    ParamsArgs, PruneArgs, PruneMethodArg, RlVariant, StrategyArg,
};

fn activation_sidecar(stats: &Path) -> PathBuf {
    let mut s = stats.as_os_str().to_owned();
    s.push(".act");
    PathBuf::from(s)
}

fn read_stats(path: &Path) -> Result<CalibrationStats> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(moekit::Error::from)?)
}

fn read_model(path: &Path) -> Result<MoeModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_assignments(path: &Path) -> Result<Vec<ClusterAssignment>> {
    let doc = ReportDoc::read(path).with_context(|| format!("reading {}", path.display()))?;
    let value =
        doc.payload.get("assignments").cloned().ok_or_else(|| {
            moekit::Error::InvalidArgument(format!("{} has no `assignments` payload", path.display()))
        })?;
    Ok(serde_json::from_value(value).map_err(moekit::Error::from)?)
}

impl From<LinkageArg> for Linkage {
    fn from(l: LinkageArg) -> Self {
        match l {
            LinkageArg::Single => Linkage::Single,
            LinkageArg::Complete => Linkage::Complete,
            LinkageArg::Average => Linkage::Average,
        }
    }
}

pub fn gen(a: GenArgs) -> Result<ReportDoc> {
    let mut map = match &a.config {
        Some(p) => parse_key_values(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Default::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| moekit::Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let text: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let spec = PlantedSpec::parse(&text)?;
    let (model, truth) = gen_planted_model(&spec)?;
    save_checkpoint(&model, &a.model)?;
    if let Some(path) = &a.batch {
        save_batch(&gen_batch(&spec, a.tokens)?, path)?;
    }
    Ok(ReportDoc::new("gen")
        .meta("model", &a.model)?
        .meta("batch", &a.batch)?
        .meta("tokens", a.tokens)?
        .with_payload(json!({ "spec": spec, "planted_labels": truth }))?)
}

pub fn calibrate(a: CalibrateArgs) -> Result<ReportDoc> {
    let model = read_model(&a.model)?;
    let batch = load_batch(&a.batch)?;
    let mut options = CalibrationOptions {
        cache_activations: a.cache_activations,
        activation_silu: !a.no_silu,
        ..CalibrationOptions::default()
    };
    if let Some(limit) = a.max_cache_bytes {
        options.max_cache_bytes = limit;
    }
    let stats = collect_stats(&model, &batch, &options)?;
    std::fs::write(&a.stats, serde_json::to_string(&stats)? + "\n")?;
    let sidecar = a.cache_activations.then(|| activation_sidecar(&a.stats));
    if let Some(path) = &sidecar {
        save_activations(&stats, path)?;
    }
    let summary: Vec<_> = stats
        .layers
        .iter()
        .map(|l| json!({ "frequency": l.frequency, "router_score": l.router_score }))
        .collect();
    Ok(ReportDoc::new("calibrate")
        .meta("stats", &a.stats)?
        .meta("activations", sidecar)?
        .with_payload(json!({ "token_count": stats.token_count, "layers": summary }))?)
}

pub fn cluster(a: ClusterArgs) -> Result<ReportDoc> {
    let model = read_model(&a.model)?;
    let stats = read_stats(&a.stats)?;
    let features = match a.metric {
        MetricArg::Eo => FeatureSource::ExpertOutput,
        MetricArg::Rl => FeatureSource::RouterLogits(match a.rl_variant {
            RlVariant::Logits => RouterFeature::LogitProfile,
            RlVariant::Weight => RouterFeature::WeightColumn,
        }),
        MetricArg::Weight => FeatureSource::Weight,
    };
    let algorithm = match a.method {
        MethodArg::Hc => Algorithm::Hierarchical(a.linkage.into()),
        MethodArg::KmeansFix => Algorithm::KMeansFixed,
        MethodArg::KmeansRnd => Algorithm::KMeansRandom { seed: a.seed },
        MethodArg::Fcm => Algorithm::FuzzyCMeans,
    };
    let budgets = match (a.budget, a.non_uniform) {
        (Some(r), None) => vec![r; model.num_layers()],
        (None, Some(ratio)) => non_uniform_budgets(&stats, ratio)?,
        _ => bail!(moekit::Error::InvalidArgument(
            "give exactly one of --budget or --non-uniform".into()
        )),
    };
    let config = ClusterConfig { features, algorithm };
    let assignments = cluster_model(&model, &stats, &budgets, &config)?;
    Ok(ReportDoc::new("cluster")
        .meta("model", &a.model)?
        .meta("stats", &a.stats)?
        .meta("config", config)?
        .with_payload(json!({ "budgets": budgets, "assignments": assignments }))?)
}

pub fn merge(a: MergeArgs) -> Result<ReportDoc> {
    let model = read_model(&a.model)?;
    let mut stats = read_stats(&a.stats)?;
    let assignments = read_assignments(&a.assignments)?;
    let strategy = match a.strategy {
        StrategyArg::Average => MergeStrategy::Average,
        StrategyArg::Frequency => MergeStrategy::Frequency,
        StrategyArg::Fixdom => MergeStrategy::FixDom,
    };
    let features = a.fixdom_features.map(|f| match f {
        FixDomArg::Act => FixDomFeatures::Activation,
        FixDomArg::Weight => FixDomFeatures::Weight,
        FixDomArg::ActWeight => FixDomFeatures::ActivationWeight,
    });
    let sidecar = activation_sidecar(&a.stats);
    if strategy == MergeStrategy::FixDom
        && matches!(
            features,
            Some(FixDomFeatures::Activation | FixDomFeatures::ActivationWeight)
        )
        && sidecar.exists()
    {
        attach_activations(&mut stats, load_activations(&sidecar)?)?;
    }
    let (merged, plan) = merge_model(&model, &stats, &assignments, strategy, features)?;
    save_checkpoint(&merged, &a.output_model)?;
    Ok(ReportDoc::new("merge")
        .meta("model", &a.model)?
        .meta("output_model", &a.output_model)?
        .with_payload(json!({ "plan": plan, "params": ParamReport::for_models(&model, &merged) }))?)
}

pub fn prune(a: PruneArgs) -> Result<ReportDoc> {
    let model = read_model(&a.model)?;
    let stats = read_stats(&a.stats)?;
    let need_budget = || {
        a.budget
            .ok_or_else(|| moekit::Error::InvalidArgument("this method needs --budget".into()))
    };
    let need_ratio = || {
        a.ratio
            .ok_or_else(|| moekit::Error::InvalidArgument("this method needs --ratio".into()))
    };
    let (reduced, payload) = match a.method {
        PruneMethodArg::F | PruneMethodArg::S => {
            let result = if matches!(a.method, PruneMethodArg::F) {
                f_prune(&stats, need_ratio()?)?
            } else {
                s_prune(&stats, need_ratio()?)?
            };
            (apply_prune(&model, &result)?, json!({ "prune": result }))
        }
        PruneMethodArg::O | PruneMethodArg::OSampled => {
            let batch_path = a
                .batch
                .as_ref()
                .ok_or_else(|| moekit::Error::InvalidArgument("O-prune needs --batch".into()))?;
            let batch = load_batch(batch_path)?;
            let budget = if matches!(a.method, PruneMethodArg::O) {
                OPruneBudget::Exhaustive
            } else {
                let samples = a
                    .samples
                    .ok_or_else(|| moekit::Error::InvalidArgument("sampled O-prune needs --samples".into()))?;
                OPruneBudget::Sampled { samples, seed: a.seed }
            };
            let options = OPruneOptions {
                budget,
                objective: if a.end_to_end {
                    OPruneObjective::EndToEnd
                } else {
                    OPruneObjective::LayerLocal
                },
                retain_enumeration: false,
            };
            let result = o_prune(&model, &batch, need_budget()?, &options)?;
            (apply_prune(&model, &result)?, json!({ "prune": result }))
        }
        PruneMethodArg::Msmoe => {
            let r = need_budget()?;
            let assignments = stats
                .layers
                .iter()
                .enumerate()
                .map(|(l, ls)| {
                    let f = FeatureMatrix::router_logits(&model.layers()[l], ls, RouterFeature::LogitProfile)?;
                    msmoe_group(ls, &f, r)
                })
                .collect::<moekit::Result<Vec<_>>>()?;
            let (merged, plan) = merge_model(&model, &stats, &assignments, MergeStrategy::Frequency, None)?;
            (merged, json!({ "assignments": assignments, "plan": plan }))
        }
    };
    save_checkpoint(&reduced, &a.output_model)?;
    let mut payload = payload;
    payload["params"] = serde_json::to_value(ParamReport::for_models(&model, &reduced))?;
    Ok(ReportDoc::new("prune")
        .meta("model", &a.model)?
        .meta("output_model", &a.output_model)?
        .with_payload(payload)?)
}

fn shares_routers(a: &MoeModel, b: &MoeModel) -> bool {
    a.num_layers() == b.num_layers() && a.layers().iter().zip(b.layers()).all(|(x, y)| x.router() == y.router())
}

pub fn eval(a: EvalArgs) -> Result<ReportDoc> {
    let model = read_model(&a.model)?;
    let batch = load_batch(&a.batch)?;
    let stats = a.stats.as_deref().map(read_stats).transpose()?;
    let mut doc = ReportDoc::new("eval").meta("model", &a.model)?;
    let mut payload = serde_json::Map::new();
    if let Some(path) = &a.reduced {
        let reduced = read_model(path)?;
        let fidelity = output_fidelity(&model, &reduced, &batch)?;
        let jensen_slack = if shares_routers(&model, &reduced) {
            model_jensen_slack(&model, &reduced, &batch)?
                .into_iter()
                .reduce(f64::min)
        } else {
            None
        };
        let layers = match (&a.assignments, &stats) {
            (Some(p), Some(stats)) => read_assignments(p)?
                .iter()
                .zip(&stats.layers)
                .map(|(asg, ls)| LayerQuality::compute(&FeatureMatrix::expert_outputs(ls)?, asg))
                .collect::<moekit::Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let report = QualityReport {
            fidelity,
            layers,
            jensen_slack,
        };
        payload.insert("reduced".into(), serde_json::to_value(report)?);
        payload.insert(
            "params".into(),
            serde_json::to_value(ParamReport::for_models(&model, &reduced))?,
        );
        doc = doc.meta("reduced", path)?;
    }
    if let (Some(r), Some(stats)) = (a.fcm, &stats) {
        let result = fcm_merge_eval(&model, stats, &batch, r, &Default::default())?;
        payload.insert(
            "fcm".into(),
            json!({ "budget": r, "quality": result.quality, "memberships": result.memberships }),
        );
    }
    Ok(doc.with_payload(payload)?)
}

pub fn oracle(a: OracleArgs) -> Result<ReportDoc> {
    let stats = read_stats(&a.stats)?;
    let ls = stats
        .layers
        .get(a.layer)
        .ok_or_else(|| moekit::Error::InvalidArgument(format!("no layer {} in statistics", a.layer)))?;
    let f = FeatureMatrix::expert_outputs(ls)?;
    let opt = opt_partition_oracle(&f, a.budget)?;
    let linkage: Linkage = a.linkage.into();
    let hc = cluster_features(&f, a.budget, Algorithm::Hierarchical(linkage))?;
    let hc_cost = partition_cost(&f, &hc.labels)?;
    let ratio = if opt.cost > 0.0 {
        hc_cost / opt.cost
    } else if hc_cost == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(ReportDoc::new("oracle")
        .meta("stats", &a.stats)?
        .meta("layer", a.layer)?
        .with_payload(json!({
            "budget": a.budget,
            "opt_labels": opt.assignment.labels,
            "opt_cost": opt.cost,
            "enumerated": opt.enumerated.to_string(),
            "stirling": stirling2(f.len(), a.budget).to_string(),
            "linkage": linkage,
            "hc_labels": hc.labels,
            "hc_cost": hc_cost,
            "ratio": ratio,
            "within_3_opt": ratio <= 3.0,
        }))?)
}

pub fn params(a: ParamsArgs) -> Result<ReportDoc> {
    if let Some(name) = &a.preset {
        let dims = ArchDims::preset(name)?;
        let counts = if a.experts.is_empty() {
            vec![dims.experts]
        } else {
            a.experts.clone()
        };
        if let Some(&bad) = counts.iter().find(|&&e| e == 0 || e > dims.experts) {
            bail!(moekit::Error::InvalidArgument(format!(
                "expert count {bad} must be in 1..={}",
                dims.experts
            )));
        }
        let reports: Vec<ParamReport> = counts.iter().map(|&e| dims.report(e)).collect();
        return Ok(ReportDoc::new("params")
            .meta("preset", &dims.name)?
            .with_payload(json!({ "architecture": dims, "reports": reports }))?);
    }
    let (Some(m), Some(r)) = (&a.model, &a.reduced) else {
        bail!(moekit::Error::InvalidArgument(
            "give --preset, or both --model and --reduced".into()
        ));
    };
    let report = ParamReport::for_models(&read_model(m)?, &read_model(r)?);
    Ok(ReportDoc::new("params")
        .meta("model", m)?
        .meta("reduced", r)?
        .with_payload(json!({ "reports": [report] }))?)
}
