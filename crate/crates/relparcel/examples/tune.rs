// temporary tuning harness, not part of the deliverable
use relparcel::backbone::BackboneConfig;
use relparcel::config::{ModelSection, RunConfig, TrainSection};
use relparcel::data::{generate_dataset, LabeledImage, SceneRecipe};
use relparcel::model::RelationMode;
use relparcel::train::{evaluate, train};
use std::time::Instant;

fn accept_config(mode: RelationMode, lr: f64, epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            input_size: 32,
            block_channels: vec![8, 16],
            pool_after_block: vec![true, false],
            dilation_last_block: 1,
            drop_last_pool: false,
        },
        model: ModelSection {
            num_labels: 6,
            parcel_channels: 4,
            relation_channels: 8,
            head_hidden: 16,
            relation: mode,
        },
        train: TrainSection {
            lr,
            batch_size: 8,
            max_epochs: epochs,
            patience: epochs as u32, // disable early stop for tuning
            decay_patience: 1000,
            seed,
            ..TrainSection::default()
        },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cmd = args.get(1).map(String::as_str).unwrap_or("overfit");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(11);

    match cmd {
        "overfit" => {
            let recipe = SceneRecipe::default_recipe();
            let ds = generate_dataset(&recipe, 64, 42).unwrap();
            let cfg = accept_config(RelationMode::Conv, lr, epochs, seed);
            let t0 = Instant::now();
            let out = train(&cfg, &ds, seed).unwrap();
            let refs: Vec<&LabeledImage> = ds.iter().collect();
            let (loss, report) = evaluate(&out.model, &refs, 0.5).unwrap();
            println!(
                "overfit lr={lr} epochs={} seed={seed}: loss {:.4} F1 {:.4} in {:.1}s",
                out.state.history.len(), loss, report.mean_f1,
                t0.elapsed().as_secs_f64()
            );
            for row in out.state.history.iter().step_by(epochs.max(10)/10) {
                println!("  epoch {:3}: train {:.4} val {:.4} f1 {:.4}", row.epoch, row.train_loss, row.val_loss, row.val_f1);
            }
        }
        "ablation" => {
            let recipe = SceneRecipe::default_recipe();
            let train_ds = generate_dataset(&recipe, 512, 100).unwrap();
            let test_ds = generate_dataset(&recipe, 128, 200).unwrap();
            let test_refs: Vec<&LabeledImage> = test_ds.iter().collect();
            for mode in [RelationMode::Conv, RelationMode::Mlp, RelationMode::None] {
                let t0 = Instant::now();
                let cfg = accept_config(mode, lr, epochs, seed);
                let out = train(&cfg, &train_ds, seed).unwrap();
                let (_, report) = evaluate(&out.model, &test_refs, 0.5).unwrap();
                println!(
                    "ablation {:?} lr={lr} epochs={epochs} seed={seed}: held-out F1 {:.4} in {:.1}s",
                    mode, report.mean_f1, t0.elapsed().as_secs_f64()
                );
            }
        }
        other => eprintln!("unknown: {other}"),
    }
}
