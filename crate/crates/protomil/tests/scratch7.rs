use protomil::data::generate_synthetic_embedding_bags;
use protomil::eval::compute_auc;
use protomil::losses::LossConfig;
use protomil::mil::{Model, ModelConfig};
use protomil::train::*;

#[test]
#[ignore]
fn emb() {
    let getf = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let getu = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let train_bags = generate_synthetic_embedding_bags(100, 512, 21).unwrap();
    let test_bags = generate_synthetic_embedding_bags(40, 512, 22).unwrap();
    let mut model = Model::init(ModelConfig::embedding_default(512), std::env::var("MS").ok().and_then(|v| v.parse().ok()).unwrap_or(3)).unwrap();
    let opt = OptimizerConfig {
        lr_warmup: getf("LRW", 5e-3),
        lr_finetune: getf("LRF", 2e-4),
        lr_joint: getf("LRJ", 1e-4),
        ..OptimizerConfig::default()
    };
    let schedule = TrainSchedule {
        projection_every: getu("PE", 5),
        ..TrainSchedule::new(getu("W", 5), getu("F", 5), getu("J", 5), 3)
    };
    let t0 = std::time::Instant::now();
    let report = run_full_training(&mut model, &train_bags, &schedule, &opt, &LossConfig::default()).unwrap();
    for e in &report.epochs {
        println!("{:>3} {:10} ce={:.4} clst={:.4} sep={:.4}", e.epoch, e.phase, e.mean_cross_entropy, e.mean_cluster, e.mean_separation);
    }
    let auc = compute_auc(&score_bags(&model, &test_bags).unwrap()).unwrap();
    println!("AUC {auc:.4} in {:.0}s", t0.elapsed().as_secs_f64());
}
