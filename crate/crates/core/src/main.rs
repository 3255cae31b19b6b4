// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use circuitprint::datasets::{self, ContrastivePair, Task, TokenizedPair};
use circuitprint::edges::{ranked_edges, total_importance_pair, Alg1Mode, EdgeGraph};
use circuitprint::eval::{cpr_cmd, default_grid, faithfulness_curve};
use circuitprint::fingerprint::{dataset_targets, identity_map, node_scores, ComponentScores, NativeTargets, TargetMode};
use circuitprint::model::{file_hash, WEIGHTS_FILE};
use circuitprint::steering::{
    self, default_alphas, generate_steered, site_for, steering_sweep, GenerationRecord, SteerSpace, SteeringSpec,
};
use circuitprint::{toy, Error, Model, Result, Tokenizer};

#[derive(Parser, Debug)]
#[command(name = "circuitprint", version, about = "Circuit discovery and steering by answer-token geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Node scores over a dataset plus per-prompt identity maps.
    Trace(TraceArgs),
    /// Edge graph, DOT rendering and per-head Shapley table.
    Edges(EdgesArgs),
    /// Faithfulness sweep and CPR/CMD.
    Eval(EvalArgs),
    /// Steering sweep against the patching baseline, plus steered generations.
    Steer(SteerArgs),
    /// Writes a generated dataset as JSONL.
    Generate(GenerateArgs),
    /// Writes a seeded toy model and its tokenizer.
    InitToy(InitToyArgs),
    /// Prints token ids of a text.
    Tokenize(TokenizeArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    model_dir: PathBuf,
    /// Tokenizer directory; defaults to the model directory when it holds
    /// vocab.json and merges.txt, else the built-in GPT-2 vocabulary.
    #[arg(long)]
    tokenizer_dir: Option<PathBuf>,
    #[arg(long, default_value = "ioi")]
    task: String,
    #[arg(long, conflicts_with = "generate")]
    dataset: Option<PathBuf>,
    /// Number of pairs to generate for `--task`.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "per-pair")]
    target_mode: String,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EdgesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "single-factor")]
    alg1_mode: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "single-factor")]
    alg1_mode: String,
    /// Comma-separated sizes: values with a decimal point are fractions of
    /// all edges, integers are edge counts. Defaults to 20 log-spaced
    /// fractions from 0.001 to 1.
    #[arg(long)]
    n_edges_grid: Option<String>,
}

#[derive(Args, Debug)]
struct SteerArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long, default_value_t = steering::DEFAULT_HEADS)]
    heads: usize,
    /// `head` (z space) or `residual`.
    #[arg(long, default_value = "head")]
    space: String,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long)]
    tokenizer_dir: Option<PathBuf>,
    text: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Trace(a) => cmd_trace(&a),
        Command::Edges(a) => cmd_edges(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Steer(a) => cmd_steer(&a),
        Command::Generate(a) => {
            let task: Task = a.task.parse()?;
            datasets::save_pairs(&a.out, &task.generate(a.n, a.seed))
        }
        Command::InitToy(a) => init_toy(&a.out, a.seed),
        Command::Tokenize(a) => {
            let tok = match &a.tokenizer_dir {
                Some(d) => Tokenizer::from_dir(d)?,
                None => Tokenizer::gpt2(),
            };
            println!("{}", serde_json::to_string(&tok.encode(&a.text))?);
            Ok(())
        }
    }
}

/// Model, tokenizer, dataset and provenance shared by every analysis.
struct Session {
    model: Model,
    tok: Tokenizer,
    pairs: Vec<ContrastivePair>,
    tokenized: Vec<TokenizedPair>,
    weights_sha256: String,
    target_mode: TargetMode,
}

impl Session {
    fn open(c: &Common) -> Result<Self> {
        let model = Model::from_dir(&c.model_dir)?;
        let weights_sha256 = file_hash(&c.model_dir.join(WEIGHTS_FILE))?;
        let tok_dir = c.tokenizer_dir.clone().or_else(|| {
            let has = c.model_dir.join("vocab.json").exists() && c.model_dir.join("merges.txt").exists();
            has.then(|| c.model_dir.clone())
        });
        let tok = match tok_dir {
            Some(d) => Tokenizer::from_dir(&d)?,
            None => Tokenizer::gpt2(),
        };
        if tok.vocab_size() > model.config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries, model vocabulary {}",
                tok.vocab_size(),
                model.config.vocab_size
            )));
        }
        let pairs = match (&c.dataset, c.generate) {
            (Some(path), _) => datasets::load_pairs(path, &tok)?,
            (None, Some(n)) => c.task.parse::<Task>()?.generate(n, c.seed),
            (None, None) => return Err(Error::Config("need --dataset or --generate".into())),
        };
        if pairs.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        let tokenized = datasets::tokenize_all(&pairs, &tok)?;
        let target_mode = match c.target_mode.as_str() {
            "per-pair" => TargetMode::PerPair,
            "averaged" => TargetMode::Averaged,
            other => return Err(Error::Config(format!("unknown target mode `{other}`"))),
        };
        fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        Ok(Session {
            model,
            tok,
            pairs,
            tokenized,
            weights_sha256,
            target_mode,
        })
    }

    fn provenance(&self, c: &Common, command: &str, extra: serde_json::Value) -> serde_json::Value {
        json!({
            "command": command,
            "model_dir": c.model_dir,
            "tokenizer_dir": c.tokenizer_dir,
            "task": c.task,
            "dataset": c.dataset,
            "generate": c.generate,
            "seed": c.seed,
            "target_mode": self.target_mode,
            "n_pairs": self.pairs.len(),
            "model": self.model.config,
            "weights_sha256": self.weights_sha256,
            "params": extra,
        })
    }

    fn graphs(&self, mode: Alg1Mode) -> Result<Vec<EdgeGraph>> {
        let targets = dataset_targets(&self.model, &self.tokenized, self.target_mode)?;
        self.tokenized
            .iter()
            .zip(&targets)
            .map(|(p, t)| total_importance_pair(&self.model, p, t, mode))
            .collect()
    }

    fn mean_scores(&self) -> Result<ComponentScores> {
        let targets = dataset_targets(&self.model, &self.tokenized, self.target_mode)?;
        let all = self
            .tokenized
            .iter()
            .zip(&targets)
            .map(|(p, t)| node_scores(&self.model, p, t))
            .collect::<Result<Vec<_>>>()?;
        ComponentScores::mean(&all)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn cmd_trace(a: &TraceArgs) -> Result<()> {
    let c = &a.common;
    let s = Session::open(c)?;
    let targets = dataset_targets(&s.model, &s.tokenized, s.target_mode)?;
    let mut per_pair = Vec::new();
    let id_dir = c.out.join("identity");
    fs::create_dir_all(&id_dir).map_err(|e| Error::io(&id_dir, e))?;
    for (i, (p, t)) in s.tokenized.iter().zip(&targets).enumerate() {
        let native = NativeTargets::new(&s.model, t)?;
        let (_, clean) = s.model.forward_cached(&p.clean)?;
        let (_, corrupt) = s.model.forward_cached(&p.corrupt)?;
        per_pair.push(circuitprint::fingerprint::node_scores_cached(&s.model, &clean, &corrupt, &native)?);
        let map = identity_map(&s.model, &clean, &native);
        map.write_csv(create(&id_dir.join(format!("pair_{i:04}.csv")))?, Some(&s.tok))?;
    }
    let mean = ComponentScores::mean(&per_pair)?;
    write_json(
        &c.out.join("scores.json"),
        &json!({
            "config": s.provenance(c, "trace", json!({})),
            "scores": mean.to_json(),
            "per_pair": per_pair.iter().map(ComponentScores::to_json).collect::<Vec<_>>(),
        }),
    )
}

fn cmd_edges(a: &EdgesArgs) -> Result<()> {
    let c = &a.common;
    let s = Session::open(c)?;
    let mode: Alg1Mode = a.alg1_mode.parse()?;
    let graph = EdgeGraph::mean(&s.graphs(mode)?)?;
    write_json(
        &c.out.join("graph.json"),
        &json!({
            "config": s.provenance(c, "edges", json!({ "alg1_mode": mode })),
            "graph": graph,
        }),
    )?;
    write_file(&c.out.join("graph.dot"), graph.to_dot().as_bytes())?;
    graph.write_shapley_csv(create(&c.out.join("shapley.csv"))?)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry `{x}`")))
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let s = Session::open(c)?;
    let mode: Alg1Mode = a.alg1_mode.parse()?;
    let graph = EdgeGraph::mean(&s.graphs(mode)?)?;
    let ranking = ranked_edges(&graph);
    let total = ranking.len();
    let fractions = match &a.n_edges_grid {
        None => default_grid(),
        Some(spec) => {
            let mut out = Vec::new();
            for item in spec.split(',').map(str::trim) {
                let f = if item.contains('.') || item.contains('e') {
                    item.parse::<f64>().ok()
                } else {
                    item.parse::<usize>().ok().map(|n| n as f64 / total as f64)
                };
                out.push(f.ok_or_else(|| Error::Config(format!("bad --n-edges-grid entry `{item}`")))?);
            }
            out
        }
    };
    let curve = faithfulness_curve(&s.model, &s.tokenized, &ranking, &fractions)?;
    curve.write_csv(create(&c.out.join("faithfulness.csv"))?)?;
    let metrics = cpr_cmd(&curve)?;
    write_json(
        &c.out.join("metrics.json"),
        &json!({
            "config": s.provenance(c, "eval", json!({ "alg1_mode": mode, "fractions": fractions })),
            "cpr": metrics.cpr,
            "cmd": metrics.cmd,
            "n_edges_total": total,
            "n_pairs": curve.n_pairs,
            "skipped_pairs": curve.skipped,
        }),
    )
}

fn cmd_steer(a: &SteerArgs) -> Result<()> {
    let c = &a.common;
    let s = Session::open(c)?;
    let alphas: Vec<f32> = match &a.alphas {
        Some(list) => parse_list(list, "--alphas")?,
        None => default_alphas(),
    };
    let space = match a.space.as_str() {
        "head" => SteerSpace::Head,
        "residual" => SteerSpace::Residual,
        other => return Err(Error::Config(format!("unknown steering space `{other}`"))),
    };
    if a.heads == 0 {
        return Err(Error::Config("--heads must be at least 1".into()));
    }
    let scores = s.mean_scores()?;
    let heads = scores.top_heads(a.heads);
    let mut sites = Vec::new();
    for h in &heads {
        let site = site_for(*h, space)?;
        if !sites.contains(&site) {
            sites.push(site);
        }
    }
    let rows = steering_sweep(&s.model, &s.tokenized, &sites, &alphas)?;
    steering::write_sweep_csv(&rows, create(&c.out.join("sweep.csv"))?)?;

    let alpha = alphas.last().copied().unwrap_or(1.0);
    let reps = steering::answer_reps(&s.model, &s.tokenized)?;
    let prototypes: Vec<_> = reps.values().collect();
    let mut out = create(&c.out.join("generations.jsonl"))?;
    for (pair, tp) in s.pairs.iter().zip(&s.tokenized) {
        let spec = SteeringSpec::known_target(&sites, &prototypes, &[&reps[&tp.a_plus]], &[&reps[&tp.a_minus]], alpha)?;
        let ids = generate_steered(&s.model, &tp.clean, &spec, a.max_new_tokens)?;
        let mut summary = spec.summary();
        summary["source"] = json!(pair.a_plus);
        summary["target"] = json!(pair.a_minus);
        let rec = GenerationRecord {
            prompt: pair.clean.clone(),
            steered_text: s.tok.decode(&ids)?,
            spec: summary,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&c.out, e))?;
    }
    write_json(
        &c.out.join("steer.json"),
        &json!({
            "config": s.provenance(c, "steer", json!({
                "alphas": alphas, "heads": a.heads, "space": space, "max_new_tokens": a.max_new_tokens,
            })),
            "sites": sites.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        }),
    )
}

fn init_toy(out: &Path, seed: u64) -> Result<()> {
    let corpus = datasets::corpus();
    let tok = Tokenizer::for_corpus(corpus.iter().map(String::as_str));
    let mut config = toy::toy_config();
    config.vocab_size = tok.vocab_size();
    let model = toy::random_model(&config, seed);
    model.save(out, &format!("toy-random-seed-{seed}"))?;
    tok.save(out)
}
