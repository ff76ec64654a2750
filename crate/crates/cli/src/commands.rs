use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attrlab::alignment::IaNeurons;
use attrlab::analysis::{
    artifact_detection, diversity_metrics, fig3_series, fig4_series, table3_coefficients, write_table1, write_table3,
    Table3Row,
};
use attrlab::data::{gen_synthetic_nli, Dataset};
use attrlab::faithfulness::{run_protocol, IaNeuronSelector, NaSelector, NeuronSelector, RandomSelector};
use attrlab::instance_attribution::write_scores_csv;
use attrlab::model::{accuracy, init_model, load_checkpoint, save_checkpoint, train, Parameters};
use attrlab::neuron_attribution::{IgRule, NeuronDump};
use attrlab::retrain_harness::{sweep, Aggregation, RetrainContext, Series, SubsetManifest, SweepMethod, SweepResult};
use attrlab::{AttributionConfig, AttributionEngine, Direction, InstanceScores, NeuronId, RankedNeurons, ScoreMethod, TargetClass};
use serde::{Deserialize, Serialize};

use crate::config::{self, Config, LoadedConfig};
use crate::io::{head, load_data, read_json, sha256_hex, usage, write_csv, write_json, DataDir, Provenance};
use crate::{
    AggregationArg, AnalyzeArgs, AttrFlags, AttributeArgs, AttributeMethod, Command, Common, Evaluated,
    FaithfulnessArgs, GenDataArgs, IgRuleArg, NeuronMethod, NeuronsArgs, Report, SelectorArg, SweepArgs,
    SweepMethodArg, TargetArg, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Attribute(a) => attribute(a),
        Command::Neurons(a) => neurons(a),
        Command::Faithfulness(a) => faithfulness(a),
        Command::RetrainSweep(a) => retrain_sweep(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn load_config(common: &Common) -> Result<(Config, String)> {
    let LoadedConfig { config, bytes } = config::load(common.config.as_deref()).map_err(usage)?;
    Ok((config, sha256_hex(&bytes)))
}

impl From<TargetArg> for TargetClass {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Predicted => TargetClass::Predicted,
            TargetArg::Gold => TargetClass::Gold,
        }
    }
}

impl From<IgRuleArg> for IgRule {
    fn from(r: IgRuleArg) -> Self {
        match r {
            IgRuleArg::Midpoint => IgRule::Midpoint,
            IgRuleArg::Right => IgRule::Right,
        }
    }
}

fn attribution_config(base: &AttributionConfig, flags: &AttrFlags) -> Result<AttributionConfig> {
    let mut c = base.clone();
    if let Some(r) = flags.r {
        c.r = r;
    }
    if let Some(m) = flags.ig_steps {
        c.ig_steps = m;
    }
    if let Some(rule) = flags.ig_rule {
        c.ig_rule = rule.into();
    }
    if let Some(d) = flags.damping {
        c.damping = d;
    }
    if let Some(t) = flags.target {
        c.target = t.into();
    }
    if let Some(t) = flags.test_label {
        c.test_label = t.into();
    }
    if c.r == 0 {
        return Err(usage("r must be at least 1"));
    }
    if c.ig_steps == 0 {
        return Err(usage("ig_steps must be at least 1"));
    }
    if !(c.damping >= 0.0 && c.damping.is_finite()) {
        return Err(usage("damping must be a finite non-negative number"));
    }
    Ok(c)
}

/// Checkpoint, data and evaluated split shared by the attribution commands.
struct Loaded {
    params: Parameters,
    data: DataDir,
    eval: Dataset,
    provenance: Provenance,
}

fn load_evaluated(command: &str, config: &Config, cfg_hash: String, e: &Evaluated) -> Result<Loaded> {
    let ckpt = load_checkpoint(&e.ckpt).with_context(|| format!("loading {}", e.ckpt.display()))?;
    let data = load_data(&e.data, &config.data)?;
    if data.vocab.len() != ckpt.params.config.vocab_size {
        bail!(
            "checkpoint expects a vocabulary of {} tokens, data has {}",
            ckpt.params.config.vocab_size,
            data.vocab.len()
        );
    }
    let eval = head(data.split(&e.split)?, e.limit)?;
    let provenance = Provenance::new(command, cfg_hash).checkpoint(&e.ckpt)?.data(&data.sha256);
    Ok(Loaded {
        params: ckpt.params,
        data,
        eval,
        provenance,
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut config, hash) = load_config(&a.common)?;
    if let Some(rate) = a.artifact_rate {
        config.data.generator.artifact_rate = rate;
    }
    let nli = gen_synthetic_nli(&config.data.generator, a.seed).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    nli.train.write_jsonl(&a.out.join("train.jsonl"))?;
    nli.test.write_jsonl(&a.out.join("test.jsonl"))?;
    nli.counterexamples.write_jsonl(&a.out.join("counterexamples.jsonl"))?;
    nli.vocab.save(&a.out.join("vocab.json"))?;
    let data = load_data(&a.out, &config.data)?;
    let prov = Provenance::new("gen-data", hash).seed(a.seed).data(&data.sha256);
    let summary = serde_json::json!({
        "train": nli.train.len(),
        "test": nli.test.len(),
        "counterexamples": nli.counterexamples.len(),
        "vocab": nli.vocab.len(),
        "generator": config.data.generator,
    });
    write_json(&a.out.join("provenance.json"), &prov, "dataset", &summary)?;
    eprintln!(
        "wrote {} train, {} test, {} counterexamples to {}",
        nli.train.len(),
        nli.test.len(),
        nli.counterexamples.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut config, hash) = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.train.lr = lr;
    }
    config.train.seed = a.seed;
    let data = load_data(&a.data, &config.data)?;
    let model_config = config.model.to_model_config(
        data.vocab.len(),
        config.data.max_len(),
        config.data.label_names.len(),
        a.seed,
    );
    model_config.validate().map_err(|e| usage(e.to_string()))?;
    let init = init_model(&model_config)?;
    let outcome = train(&init, &data.train, &config.train)?;
    for stats in &outcome.history {
        println!("{}", serde_json::to_string(stats)?);
        eprintln!(
            "epoch {:>3}  loss {:.4}  train acc {:.3}",
            stats.epoch, stats.mean_loss, stats.accuracy
        );
    }
    let test_accuracy = accuracy(&outcome.params, &data.test)?;
    eprintln!("test accuracy {test_accuracy:.4}");
    let prov = Provenance::new("train", hash).seed(a.seed).data(&data.sha256);
    let meta = serde_json::json!({
        "provenance": prov,
        "hparams": config.train,
        "history": outcome.history,
        "test_accuracy": test_accuracy,
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&outcome.params, &meta, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn score_method(m: AttributeMethod) -> ScoreMethod {
    match m {
        AttributeMethod::If => ScoreMethod::If,
        AttributeMethod::Gs => ScoreMethod::Gs,
        AttributeMethod::NaInstances => ScoreMethod::NaInstances,
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub const KIND_SCORES: &str = "instance_scores";
pub const KIND_NEURONS: &str = "neuron_rankings";
pub const KIND_IA_NEURONS: &str = "ia_neurons";
pub const KIND_FAITHFULNESS: &str = "faithfulness";
pub const KIND_SWEEP: &str = "retrain_sweep";

fn attribute(a: AttributeArgs) -> Result<()> {
    let (config, hash) = load_config(&a.common)?;
    let attr = attribution_config(&config.attribution, &a.flags)?;
    let l = load_evaluated("attribute", &config, hash, &a.eval)?;
    let engine = AttributionEngine::new(&l.params, &l.data.train, attr);
    let scores = engine.scores_for_set(score_method(a.method), &l.eval)?;
    if is_csv(&a.out) {
        write_csv(&a.out, &l.provenance, |buf| write_scores_csv(buf, &scores))
    } else {
        write_json(&a.out, &l.provenance, KIND_SCORES, &scores)
    }
}

fn neurons(a: NeuronsArgs) -> Result<()> {
    let (config, hash) = load_config(&a.common)?;
    let attr = attribution_config(&config.attribution, &a.flags)?;
    let l = load_evaluated("neurons", &config, hash, &a.eval)?;
    let engine = AttributionEngine::new(&l.params, &l.data.train, attr);
    match a.method {
        NeuronMethod::Na => {
            let dumps = l
                .eval
                .iter()
                .map(|i| {
                    let ranked = engine.neuron_ranking(i)?;
                    Ok(NeuronDump::new(&i.id, "NA", None, &ranked))
                })
                .collect::<attrlab::Result<Vec<_>>>()?;
            write_json(&a.out, &l.provenance, KIND_NEURONS, &dumps)
        }
        NeuronMethod::IaNeuronsIf | NeuronMethod::IaNeuronsGs => {
            let method = if matches!(a.method, NeuronMethod::IaNeuronsIf) {
                ScoreMethod::If
            } else {
                ScoreMethod::Gs
            };
            let r = engine.config().r;
            engine.scores_for_set(method, &l.eval)?;
            let lists = l
                .eval
                .iter()
                .map(|i| engine.ia_neurons(method, i, r))
                .collect::<attrlab::Result<Vec<IaNeurons>>>()?;
            write_json(&a.out, &l.provenance, KIND_IA_NEURONS, &lists)
        }
    }
}

fn faithfulness(a: FaithfulnessArgs) -> Result<()> {
    let (config, hash) = load_config(&a.common)?;
    let attr = attribution_config(&config.attribution, &a.flags)?;
    let l = load_evaluated("faithfulness", &config, hash, &a.eval)?;
    let engine = AttributionEngine::new(&l.params, &l.data.train, attr);
    let mut protocol = config.analysis.protocol.clone();
    if let Some(r) = a.sufficiency_r {
        protocol.sufficiency_r = r;
    }
    if let Some(r) = a.comprehensiveness_r {
        protocol.comprehensiveness_r = r;
    }
    let seeds = a.seeds.unwrap_or_else(|| config.analysis.faithfulness_seeds.clone());
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let na = NaSelector { engine: &engine };
    let if_sel = IaNeuronSelector {
        engine: &engine,
        method: ScoreMethod::If,
    };
    let gs_sel = IaNeuronSelector {
        engine: &engine,
        method: ScoreMethod::Gs,
    };
    let random = RandomSelector::new(&l.params.config);
    let mut selectors: Vec<&dyn NeuronSelector> = Vec::new();
    for s in &a.selectors {
        selectors.push(match s {
            SelectorArg::Na => &na,
            SelectorArg::IfNeuron => &if_sel,
            SelectorArg::GsNeuron => &gs_sel,
            SelectorArg::Random => &random,
        });
    }
    let table = run_protocol(&l.params, &l.eval, &selectors, &seeds, &protocol)?;
    write_csv(&a.out, &l.provenance, |buf| table.write_csv(buf))?;
    write_json(&sibling(&a.out, "records.json"), &l.provenance, KIND_FAITHFULNESS, &table)?;
    for rep in &table.reports {
        eprintln!(
            "{:<10} {:<18} r={:<3} preserved {:6.2}%{}",
            rep.selector.as_str(),
            rep.test_kind.as_str(),
            rep.r,
            rep.mean_preserved_pct,
            if rep.clamped { "  (r clamped)" } else { "" }
        );
    }
    Ok(())
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn sweep_method(m: SweepMethodArg) -> SweepMethod {
    match m {
        SweepMethodArg::If => SweepMethod::If,
        SweepMethodArg::Gs => SweepMethod::Gs,
        SweepMethodArg::NaInstances => SweepMethod::NaInstances,
        SweepMethodArg::Random => SweepMethod::Random,
    }
}

#[derive(Serialize, Deserialize)]
pub struct SweepOutput {
    pub result: SweepResult,
    pub curves: Vec<Series>,
}

fn retrain_sweep(a: SweepArgs) -> Result<()> {
    let (config, hash) = load_config(&a.common)?;
    let attr = attribution_config(&config.attribution, &a.flags)?;
    let l = load_evaluated("retrain-sweep", &config, hash, &a.eval)?;
    let mut sweep_cfg = config.analysis.sweep.clone();
    if let Some(f) = a.fractions {
        sweep_cfg.fractions = f;
    }
    if let Some(s) = a.seeds {
        sweep_cfg.seeds = s;
    }
    if let Some(agg) = a.aggregation {
        sweep_cfg.aggregation = match agg {
            AggregationArg::Sum => Aggregation::Sum,
            AggregationArg::Max => Aggregation::Max,
        };
    }
    if sweep_cfg.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(usage("fractions must lie in (0, 1]"));
    }
    if sweep_cfg.seeds.is_empty() || sweep_cfg.fractions.is_empty() || sweep_cfg.directions.is_empty() {
        return Err(usage("sweep needs at least one fraction, seed and direction"));
    }
    let methods: Vec<SweepMethod> = a.methods.iter().map(|&m| sweep_method(m)).collect();
    let engine = AttributionEngine::new(&l.params, &l.data.train, attr);
    let mut scores = HashMap::new();
    for m in &methods {
        if let Some(sm) = m.score_method() {
            if let Entry::Vacant(slot) = scores.entry(sm) {
                eprintln!("scoring {} on {} instances", sm.as_str(), l.eval.len());
                slot.insert(engine.scores_for_set(sm, &l.eval)?);
            }
        }
    }
    let base_config = l.params.config.clone();
    let mut ctx = RetrainContext::new(base_config, &l.data.train, &l.eval, config.train.clone(), &l.params)?;
    if a.from_checkpoint {
        ctx = ctx.with_init(l.params.clone());
    }
    eprintln!(
        "retraining {} runs",
        methods.len() * sweep_cfg.directions.len() * sweep_cfg.fractions.len() * sweep_cfg.seeds.len()
    );
    let result = sweep(&ctx, &methods, &scores, &sweep_cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(&a.out.join("curves.csv"), &l.provenance, |buf| result.write_csv(buf))?;
    result.write_manifests(&a.out.join("manifests"))?;
    let curves = result.curves();
    write_json(
        &a.out.join("curves.json"),
        &l.provenance,
        KIND_SWEEP,
        &SweepOutput { result, curves },
    )?;
    Ok(())
}

fn read_scores(inputs: &[PathBuf]) -> Result<Vec<(String, Vec<InstanceScores>)>> {
    if inputs.is_empty() {
        return Err(usage("--inputs needs at least one instance score file"));
    }
    inputs
        .iter()
        .map(|p| {
            let env = read_json::<Vec<InstanceScores>>(p)?;
            if env.kind != KIND_SCORES {
                return Err(usage(format!("{} holds {:?}, expected {KIND_SCORES:?}", p.display(), env.kind)));
            }
            let method = env
                .results
                .first()
                .map(|s| s.method.as_str().to_string())
                .ok_or_else(|| usage(format!("{} has no scores", p.display())))?;
            Ok((method, env.results))
        })
        .collect()
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (config, hash) = load_config(&a.common)?;
    let prov = Provenance::new(&format!("analyze {}", report_name(a.report)), hash);
    match a.report {
        Report::Table1 => {
            let rows = read_scores(&a.inputs)?;
            write_csv(&a.out, &prov, |buf| write_table1(buf, &rows, config.analysis.top_k))
        }
        Report::Fig3 => {
            let rows = read_scores(&a.inputs)?;
            if rows.len() < 2 {
                return Err(usage("fig3 compares at least two instance score files"));
            }
            let series = fig3_series(&rows, &config.analysis.overlap_fractions)?;
            write_json(&a.out, &prov, "series", &series)
        }
        Report::Fig4 => fig4(&a, &config, prov),
        Report::Table3 => table3(&a, &config, prov),
        Report::Table4 => table4(&a, &config, prov),
    }
}

fn report_name(r: Report) -> &'static str {
    match r {
        Report::Table1 => "table1",
        Report::Fig3 => "fig3",
        Report::Fig4 => "fig4",
        Report::Table3 => "table3",
        Report::Table4 => "table4",
    }
}

fn fig4(a: &AnalyzeArgs, config: &Config, prov: Provenance) -> Result<()> {
    let mut na: Option<BTreeMap<String, RankedNeurons>> = None;
    let mut ia: Vec<(String, BTreeMap<String, Vec<NeuronId>>)> = Vec::new();
    for p in &a.inputs {
        match crate::io::peek_kind(p)?.as_str() {
            KIND_NEURONS => {
                let env = read_json::<Vec<NeuronDump>>(p)?;
                na = Some(env.results.iter().map(|d| (d.instance_id.clone(), d.ranked())).collect());
            }
            KIND_IA_NEURONS => {
                let env = read_json::<Vec<IaNeurons>>(p)?;
                let method = env.results.first().map(|x| x.method.as_str()).unwrap_or("IA").to_string();
                ia.push((method, env.results.iter().map(|x| (x.test_id.clone(), x.neurons())).collect()));
            }
            other => return Err(usage(format!("{} holds {other:?}, not neuron lists", p.display()))),
        }
    }
    let na = na.ok_or_else(|| usage("fig4 needs one NA neuron file among --inputs"))?;
    if ia.is_empty() {
        return Err(usage("fig4 needs at least one IA-Neurons file among --inputs"));
    }
    let mut out = Vec::new();
    for (method, lists) in &ia {
        for mut s in fig4_series(&na, lists, &config.analysis.neuron_ns)? {
            s.label = format!("{method}: {}", s.label);
            out.push(s);
        }
    }
    write_json(&a.out, &prov, "series", &out)
}

fn require<'p>(v: &'p Option<PathBuf>, flag: &str, report: &str) -> Result<&'p Path> {
    v.as_deref().ok_or_else(|| usage(format!("{report} needs --{flag}")))
}

/// Accuracies of one (method, direction) and its lowest-seed manifest.
type Group<'m> = (Vec<f64>, Option<&'m SubsetManifest>);

fn table3(a: &AnalyzeArgs, config: &Config, prov: Provenance) -> Result<()> {
    let ckpt_path = require(&a.ckpt, "ckpt", "table3")?;
    let data_path = require(&a.data, "data", "table3")?;
    let [sweep_dir] = a.inputs.as_slice() else {
        return Err(usage("table3 takes one retrain-sweep output directory in --inputs"));
    };
    let env = read_json::<SweepOutput>(&sweep_dir.join("curves.json"))?;
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let data = load_data(data_path, &config.data)?;
    let result = env.results.result;
    let fraction = match a.fraction {
        Some(f) => f,
        None => result
            .manifests
            .iter()
            .map(|m| m.fraction)
            .min_by(f64::total_cmp)
            .ok_or_else(|| usage("sweep output has no manifests"))?,
    };
    let mut groups: BTreeMap<(SweepMethod, Direction), Group<'_>> = BTreeMap::new();
    for (p, m) in result.points.iter().zip(&result.manifests) {
        if p.fraction != fraction {
            continue;
        }
        let g = groups.entry((p.method, p.direction)).or_default();
        g.0.push(p.accuracy);
        if g.1.is_none_or(|prev| m.seed < prev.seed) {
            g.1 = Some(m);
        }
    }
    if groups.is_empty() {
        return Err(usage(format!("sweep output has no runs at fraction {fraction}")));
    }
    let rows = groups
        .into_iter()
        .map(|((method, dir), (accs, manifest))| {
            let subset = data.train.subset(&manifest.expect("group has a run").ids)?;
            Ok(Table3Row {
                group: format!("{}-{}", method.as_str(), dir.as_str()),
                accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                metrics: diversity_metrics(&subset, &ckpt.params)?,
            })
        })
        .collect::<attrlab::Result<Vec<_>>>()?;
    let prov = prov.checkpoint(ckpt_path)?.data(&data.sha256);
    write_csv(&a.out, &prov, |buf| write_table3(buf, &rows))?;
    for (metric, c) in table3_coefficients(&rows) {
        match c {
            Some(v) => eprintln!("{metric:<10} {v:+.4}"),
            None => eprintln!("{metric:<10} undefined"),
        }
    }
    Ok(())
}

fn table4(a: &AnalyzeArgs, config: &Config, prov: Provenance) -> Result<()> {
    let ckpt_path = require(&a.ckpt, "ckpt", "table4")?;
    let data_path = require(&a.data, "data", "table4")?;
    if !a.inputs.is_empty() {
        return Err(usage("table4 reads --ckpt and --data, not --inputs"));
    }
    let attr = attribution_config(&config.attribution, &a.flags)?;
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let data = load_data(data_path, &config.data)?;
    let heuristic = head(data.split("counterexamples")?, a.limit)?;
    let engine = AttributionEngine::new(&ckpt.params, &data.train, attr);
    let methods = [ScoreMethod::If, ScoreMethod::Gs, ScoreMethod::NaInstances];
    let report = artifact_detection(
        &engine,
        &heuristic,
        &methods,
        &config.analysis.artifact_ks,
        &config.analysis.random_seeds,
    )?;
    if report.empty {
        eprintln!("no counterexample was mispredicted as entailment; the table is empty");
    }
    let prov = prov.checkpoint(ckpt_path)?.data(&data.sha256);
    write_csv(&a.out, &prov, |buf| report.write_csv(buf))?;
    write_json(&sibling(&a.out, "json"), &prov, "artifact_report", &report)
}
