use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kstgcn::graph::PropagationMatrix;
use kstgcn::model::ForecastModel;
use kstgcn::trainer::{evaluate_model, train_with_progress, write_history_csv, Prepared};
use kstgcn_runner::config::{parse_seeds, ExperimentConfig, Mode};
use kstgcn_runner::pipeline::{
    ckg_stage, knowledge_vectors, resolved_configs, scenario_stage, upstream, RunSpec, Workspace,
};
use kstgcn_runner::plot::export_plotdata;
use kstgcn_runner::sweep::run_sweep;

#[derive(Parser)]
#[command(name = "kstgcn", about = "Knowledge-driven spatio-temporal traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds overriding the configuration.
    #[arg(long)]
    seeds: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city scenario.
    Synth(Common),
    /// Build the city knowledge graph.
    BuildKg(Common),
    /// Train knowledge embeddings.
    Embed(Common),
    /// Train the full model for the first seed.
    Train(Common),
    /// Evaluate a saved model checkpoint on the validation period.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a grid sweep over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(c) => {
            let cfg = c.load()?;
            let ws = Workspace::new(&c.out)?;
            let sc = scenario_stage(&ws, &cfg, cfg.seeds[0])?;
            sc.scenario.save(&c.out.join("scenario"))?;
            println!("scenario written to {}", c.out.join("scenario").display());
        }
        Command::BuildKg(c) => {
            let cfg = c.load()?;
            let ws = Workspace::new(&c.out)?;
            let sc = scenario_stage(&ws, &cfg, cfg.seeds[0])?;
            let ckg = ckg_stage(&ws, &sc, &cfg.ckg)?;
            ckg.store.save(&c.out.join("ckg"))?;
            println!(
                "{} entities, {} relation triples, {} attribute triples",
                ckg.store.entities().len(),
                ckg.store.relation_triples().len(),
                ckg.store.attribute_triples().len()
            );
        }
        Command::Embed(c) => {
            let cfg = c.load()?;
            let ws = Workspace::new(&c.out)?;
            let up = upstream(&ws, &cfg, cfg.seeds[0], cfg.embed.dim)?;
            up.embed.table.save(&c.out.join("embedding"), &up.ckg.store)?;
            println!("embedding written to {}", c.out.join("embedding").display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let seed = cfg.seeds[0];
            let ws = Workspace::new(&c.out)?;
            let spec = RunSpec::full(&cfg);
            let up = upstream(&ws, &cfg, seed, spec.embed_dim)?;
            let (model_cfg, train_cfg) = resolved_configs(&cfg, &spec, seed);
            let sc = &up.scenario.scenario;
            let data = Prepared::new(&sc.speeds, None, model_cfg.window, model_cfg.horizon, train_cfg.train_fraction)?;
            let kv = knowledge_vectors(&up)?;
            let p = PropagationMatrix::from_graph(&sc.graph);
            let model = ForecastModel::init(model_cfg, seed)?;
            let out = train_with_progress(model, &data, &kv, &p, &train_cfg, |r| {
                println!("epoch {:>4} loss {:.6} val rmse {:.4}", r.epoch, r.train_loss, r.report.rmse);
            })?;
            out.model.save(&c.out.join("model"))?;
            write_history_csv(&c.out.join("history.csv"), &out.history)?;
            let report = evaluate_model(&out.model, &data, &kv, &p)?;
            fs::write(c.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        }
        Command::Eval { common, model } => {
            let cfg = common.load()?;
            let seed = cfg.seeds[0];
            let ws = Workspace::new(&common.out)?;
            let model = ForecastModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let up = upstream(&ws, &cfg, seed, model.config.d_s.max(model.config.d_d).max(1))?;
            let sc = &up.scenario.scenario;
            let mc = &model.config;
            let data = Prepared::new(&sc.speeds, None, mc.window, mc.horizon, cfg.train.train_fraction)?;
            let kv = knowledge_vectors(&up)?.ablate(mc.d_s > 0, mc.d_d > 0);
            let p = PropagationMatrix::from_graph(&sc.graph);
            let report = evaluate_model(&model, &data, &kv, &p)?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(common.out.join("metrics.json"), &text)?;
            println!("{text}");
        }
        Command::Sweep { common, mode, jobs } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let rows = run_sweep(&cfg, &common.out)?;
            let files = export_plotdata(&rows, &common.out.join("plots"))?;
            println!("{} result rows, {} plot files", rows.len(), files.len());
        }
    }
    Ok(())
}
