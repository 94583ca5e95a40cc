//! Generate a dataset, train all three networks and print the comparison.
//!
//! `cargo run --release --example pipeline -- <iterations> <scenes> [batch]`

use cgnet::dataset::{generate_dataset, DatasetConfig, Split};
use cgnet::eval::{evaluate, Method, Models};
use cgnet::model::ModelConfig;
use cgnet::pipeline::{load_models, train_role, Role};
use cgnet::train::TrainConfig;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let iterations: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(4000);
    let scenes: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(600);
    let batch_size: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let (ds, stats) = generate_dataset(&DatasetConfig { scenes, ..Default::default() })?;
    println!("samples: {stats:?}");
    let tc = TrainConfig { iterations, batch_size, log_every: 500, ..Default::default() };
    let mcfg = ModelConfig::toy();
    let root = std::env::var_os("PIPELINE_OUT").map(std::path::PathBuf::from);
    // Roles listed in PIPELINE_REUSE are loaded from PIPELINE_OUT instead of trained.
    let reuse = std::env::var("PIPELINE_REUSE").unwrap_or_default();
    let mut models = match (&root, reuse.is_empty()) {
        (Some(r), false) => load_models(r)?,
        _ => Models::default(),
    };
    for role in Role::ALL {
        if reuse.split(',').any(|r| r == role.name()) {
            continue;
        }
        let t = std::time::Instant::now();
        let w = train_role(&ds, role, &mcfg, &tc, root.as_deref())?.checkpoint.weights;
        println!("{} trained in {:?}", role.name(), t.elapsed());
        match role {
            Role::Cgnet => models.cgnet = Some(w),
            Role::Agnostic => models.agnostic = Some(w),
            Role::Retrieval => models.retrieval = Some(w),
        }
    }
    for split in [Split::Test, Split::Train] {
        let rep = evaluate(&ds, &models, &Method::ALL, split, 1)?;
        println!("{split:?} chance floor {:.3}\n{}", rep.chance_floor, rep.to_table());
    }
    Ok(())
}
