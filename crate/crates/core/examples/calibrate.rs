//! Calibration probe for the synthetic benchmark.
//!
//! Trains one seed model per seed from the base config, then runs the
//! pseudo-labeling stage for every variant and prints test token error
//! rates. A variant is a comma-separated list of `section.key=value`
//! overrides of the base config, e.g. `run.mode=apl,pseudo_label.eta=0.1`.
//!
//! Usage: `BASE=overrides cargo run --release --example calibrate -- config.toml SEEDS VARIANT...`

use std::env;
use std::fs;

use atc_core::data::generate;
use atc_core::pipeline::{evaluate, run_pseudo_labeling, run_seeding, RunConfig, Which};

fn apply(base: &toml::Table, variant: &str) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut table = base.clone();
    for kv in variant.split(',').filter(|s| !s.is_empty()) {
        let (path, raw) = kv.split_once('=').ok_or("override must be key=value")?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        let mut cur = &mut table;
        for k in &keys[..keys.len() - 1] {
            cur = cur
                .get_mut(*k)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| format!("no section {k}"))?;
        }
        cur.insert(keys[keys.len() - 1].to_string(), value);
    }
    Ok(RunConfig::from_toml(&toml::to_string(&table)?)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = env::args().skip(1).collect();
    let file: toml::Table = match args.first() {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)?,
        None => toml::from_str(&RunConfig::default().to_toml())?,
    };
    // overrides that also apply to the seeding stage
    let base_overrides = env::var("BASE").unwrap_or_default();
    let base: toml::Table = toml::from_str(&apply(&file, &base_overrides)?.to_toml())?;
    let seeds: u64 = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let variants: Vec<String> = if args.len() > 2 {
        args[2..].to_vec()
    } else {
        ["run.mode=supervised", "run.mode=pl", "run.mode=mpl", "run.mode=apl"]
            .map(String::from)
            .to_vec()
    };
    let mut sums = vec![0.0; variants.len()];
    for seed in 0..seeds {
        let seed_cfg = apply(&base, &format!("run.seed={seed},data.seed={seed}"))?;
        let corpus = generate(&seed_cfg.data)?;
        let (seeded, _) = run_seeding(&seed_cfg, &corpus)?;
        let src = evaluate(&seeded, &corpus.source_dev, Which::Teacher)?;
        let train = evaluate(&seeded, &corpus.labeled, Which::Teacher)?;
        print!("train TER {:.3} conf_inc {:.3} | ", train.token_error_rate, train.mean_conf_incorrect.unwrap_or(f64::NAN));
        let test = evaluate(&seeded, &corpus.test, Which::Teacher)?;
        println!(
            "seed {seed}: seed model TER source {:.3} test {:.3} auc {:.3} conf_inc {:.3} conf_cor {:.3} {:?}",
            src.token_error_rate,
            test.token_error_rate,
            test.auc.unwrap_or(f64::NAN),
            test.mean_conf_incorrect.unwrap_or(f64::NAN),
            test.mean_conf_correct.unwrap_or(f64::NAN),
            test.counts
        );
        for (k, v) in variants.iter().enumerate() {
            let cfg = apply(&base, &format!("{v},run.seed={seed},data.seed={seed}"))?;
            let out = run_pseudo_labeling(&cfg, seeded.clone(), &corpus, None)?;
            sums[k] += out.test.token_error_rate;
            println!(
                "  {v:<50} TER {:.3} auc {:.3} switch-auc {:.3} skipped {}",
                out.test.token_error_rate,
                out.test.auc.unwrap_or(f64::NAN),
                out.at_switch.and_then(|r| r.auc).unwrap_or(f64::NAN),
                out.skipped_unlabeled
            );
        }
    }
    println!("means:");
    for (v, s) in variants.iter().zip(&sums) {
        println!("  {v:<50} {:.4}", s / seeds as f64);
    }
    Ok(())
}
