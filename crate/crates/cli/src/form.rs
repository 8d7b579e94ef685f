use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use ravnest::clusterform::{evolve, plan_session, Evolution, GaParams, ModelFootprint, NodePool};
use ravnest::config::FootprintFile;

use crate::run::describe_plan;

#[derive(Args)]
pub struct FormArgs {
    /// CSV with header `id,ram,bandwidth`.
    #[arg(long)]
    inventory: PathBuf,
    /// TOML with either `batch_size` and a `[model]` table, or the raw
    /// `batch_size`, `fwdbwd_bytes_per_sample` and `param_bytes`.
    #[arg(long)]
    model_footprint: PathBuf,
    #[arg(long)]
    q: usize,
    #[arg(long, default_value_t = 0, env = "RAVNEST_SEED")]
    seed: u64,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    pop_size: Option<usize>,
    /// Where to write the plan (model footprints) or assignment.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn report(evo: &Evolution, pool: &NodePool, fp: &ModelFootprint, q: usize) -> String {
    let mut out = String::new();
    for c in 0..q {
        let members: Vec<usize> = evo.best.members(c).collect();
        let ram: f64 = members.iter().map(|&i| pool.nodes[i].ram).sum();
        let ids: Vec<String> = members.iter().map(|&i| pool.nodes[i].id.to_string()).collect();
        out.push_str(&format!("cluster {c}: nodes [{}] ram {:.0} of M={:.0}\n", ids.join(", "), ram, fp.m()));
    }
    out.push_str(&format!(
        "fitness: imbalance {:.6e} penalty {:.6e} total {:.6e}\n",
        evo.fitness.imbalance, evo.fitness.penalty, evo.fitness.total
    ));
    if let (Some(first), Some(last)) = (evo.history.first(), evo.history.last()) {
        out.push_str(&format!("best fitness: generation 0 {first:.6e}, final {last:.6e}\n"));
    }
    out
}

pub fn run(args: FormArgs) -> Result<()> {
    let pool = NodePool::load(&args.inventory)?;
    let file = FootprintFile::load(&args.model_footprint)?;
    let fp = file.footprint()?;
    let mut ga = GaParams { seed: args.seed, ..GaParams::default() };
    if let Some(g) = args.generations {
        ga.generations = g;
    }
    if let Some(p) = args.pop_size {
        ga.pop_size = p;
    }
    let evo = evolve(&pool, &fp, args.q, &ga)?;
    print!("{}", report(&evo, &pool, &fp, args.q));
    if !evo.feasible {
        bail!(ravnest::Error::Session(format!(
            "no feasible assignment of {} nodes into {} clusters with M={:.0} bytes",
            pool.len(),
            args.q,
            fp.m()
        )));
    }
    let text = match &file {
        FootprintFile::Model { batch_size, model } => {
            let plan = plan_session(&pool, model, *batch_size, args.q, &ga)?;
            print!("{}", describe_plan(&plan));
            plan.to_toml_string()
        }
        FootprintFile::Raw(_) => toml::to_string(&evo)?,
    };
    if let Some(out) = &args.out {
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
