//! Trains each ablation mode on a synthetic corpus and prints retrieval
//! scores. Arguments are `key=value` pairs; `synth.<key>` sets a generator
//! field, anything else a training key, plus `modes=a,b` and `seeds=N`.
//!
//! cargo run --release -p dfml-core --example ablation -- steps=1500 seeds=3

use std::time::Instant;

use dfml_core::datamodel::{build_wst, estimate_phi};
use dfml_core::evaluator::evaluate;
use dfml_core::losses::Ablation;
use dfml_core::synthgen::{generate, grouped_visits, uniform_visits, SynthConfig};
use dfml_core::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut synth = SynthConfig::default();
    let mut base = TrainConfig::default();
    let mut modes = vec!["baseline".to_string(), "mlfc".into(), "full".into()];
    let mut etas: Vec<Option<f64>> = vec![None];
    let mut seeds = 1u64;
    let mut offset = 0u64;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "modes" => modes = v.split(',').map(String::from).collect(),
            "seeds" => seeds = v.parse()?,
            "offset" => offset = v.parse()?,
            "etas" => etas = v.split(',').map(|e| e.parse().ok()).collect(),
            "synth.sigma_id" => synth.sigma_id = v.parse()?,
            "synth.sigma_cam" => synth.sigma_cam = v.parse()?,
            "synth.identity_dim" => synth.identity_dim = v.parse()?,
            "synth.persons" => synth.num_persons = v.parse()?,
            "synth.test_persons" => synth.num_test_persons = v.parse()?,
            "synth.images" => synth.images_per_camera = v.parse()?,
            "synth.visit" => synth.visit = uniform_visits(synth.num_cameras, v.parse()?),
            "synth.matrix" => {
                synth.visit = v
                    .split(';')
                    .map(|r| r.split(',').map(|x| x.parse::<f64>()).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<_, _>>()?
            }
            "synth.grouped" => {
                let (a, b) = v.split_once(':').ok_or("grouped=p_in:p_out")?;
                synth.visit = grouped_visits(synth.num_cameras, 2, a.parse()?, b.parse()?);
            }
            _ => base.set(k, v)?,
        }
    }
    for mode in &modes {
        for eta in &etas {
            let mut r1 = Vec::new();
            let mut map = Vec::new();
            let start = Instant::now();
            for seed in offset..offset + seeds {
                let corpus = generate(&SynthConfig { seed, ..synth.clone() })?;
                let ds = build_wst(&corpus.train)?;
                let phi = estimate_phi(&corpus.train)?;
                let cfg = TrainConfig {
                    mode: mode.parse::<Ablation>()?,
                    seed,
                    eta: *eta,
                    ..base.clone()
                };
                cfg.validate()?;
                let out = train(&ds, &cfg, eta.map(|_| &phi))?;
                let r = evaluate(&out.model, &corpus.query, &corpus.gallery)?;
                let last = out.log.last().unwrap();
                eprintln!(
                    "  {mode} eta={eta:?} seed {seed}: r1 {:.2} map {:.2} | pl {:.3} cl {:.4} jl {:.4}",
                    100.0 * r.rank1(),
                    100.0 * r.map,
                    last.pl,
                    last.cl,
                    last.jl
                );
                r1.push(r.rank1());
                map.push(r.map);
            }
            let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "{mode:<14} eta={eta:<10} rank1 {:6.2}  mAP {:6.2}  ({:.1}s/run)",
                mean(&r1),
                mean(&map),
                start.elapsed().as_secs_f64() / seeds as f64,
                eta = format!("{eta:?}")
            );
        }
    }
    Ok(())
}
