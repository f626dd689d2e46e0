use protomil::data::*;
use protomil::eval::compute_auc;
use protomil::losses::LossConfig;
use protomil::mil::types::Bag;
use protomil::mil::{Model, ModelConfig};
use protomil::proto_ops::{project_prototypes, prune_prototypes, PruneConfig};
use protomil::train::*;

fn getf(k: &str, d: f64) -> f64 { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }
fn getu(k: &str, d: usize) -> usize { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }
fn getq(k: &str, d: u64) -> u64 { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }

#[test]
#[ignore]
fn headline() {
    let t0 = std::time::Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    generate_digit_corpus(tmp.path(), getu("PD", 5000), 7).unwrap();
    let train_bags = generate_mnist_bags(&MnistBagsConfig::new(getu("NB", 500), 11, tmp.path().to_path_buf())).unwrap();
    let test_bags = generate_mnist_bags(&MnistBagsConfig::new(100, 12, tmp.path().to_path_buf())).unwrap();
    let auc = |m: &Model| compute_auc(&score_bags(m, &test_bags).unwrap()).unwrap();

    let mut model = Model::init(ModelConfig::mnist_default(), getq("MS", 5)).unwrap();
    let preload = std::env::var("LOAD").ok();
    let opt = OptimizerConfig {
        lr_warmup: getf("LRW", 5e-3),
        lr_finetune: getf("LRF", 2e-4),
        lr_joint: getf("LRJ", 1e-4),
        ..OptimizerConfig::default()
    };
    let loss = LossConfig::default();
    let w = getu("W", 30); let f = getu("F", 20); let j = getu("J", 10);

    if let Some(dir) = &preload {
        model = protomil::checkpoint::load(std::path::Path::new(dir)).unwrap();
        println!("[{:.0}s] loaded checkpoint, AUC: {:.4}", t0.elapsed().as_secs_f64(), auc(&model));
        if std::env::var("REPROJECT").is_ok() {
            project_prototypes(&mut model, &train_bags).unwrap();
            println!("[{:.0}s] AUC after reprojection: {:.4}", t0.elapsed().as_secs_f64(), auc(&model));
        }
        prune_and_report(&mut model, &train_bags, &opt, &auc);
        return;
    }

    // phase-by-phase with AUC probes
    let wsched = TrainSchedule { projection_every: 10, ..TrainSchedule::new(w, 0, 0, getq("MS", 5)) };
    let report = run_warmup(&mut model, &train_bags, &wsched, &opt, &loss).unwrap();
    for e in &report.epochs { println!("{:>3} warmup ce={:.4} clst={:.4} sep={:.4}", e.epoch, e.mean_cross_entropy, e.mean_cluster, e.mean_separation); }
    println!("[{:.0}s] AUC after warmup: {:.4}", t0.elapsed().as_secs_f64(), auc(&model));

    let mut remaining = f;
    let mut chunk_idx = 0;
    while remaining > 0 {
        let n = remaining.min(10);
        project_prototypes(&mut model, &train_bags).unwrap();
        println!("[{:.0}s] AUC after projection {}: {:.4}", t0.elapsed().as_secs_f64(), chunk_idx, auc(&model));
        let rep = run_head_finetune(&mut model, &train_bags, n, &opt, getq("MS", 5) + chunk_idx).unwrap();
        for e in &rep.epochs { println!("{:>3} finetune ce={:.4} clst={:.4} sep={:.4}", e.epoch, e.mean_cross_entropy, e.mean_cluster, e.mean_separation); }
        println!("[{:.0}s] AUC after finetune chunk {}: {:.4}", t0.elapsed().as_secs_f64(), chunk_idx, auc(&model));
        remaining -= n;
        chunk_idx += 1;
    }

    if j > 0 {
        let schedule = TrainSchedule { projection_every: getu("PE", 10), ..TrainSchedule::new(0, 0, j, getq("MS", 5)) };
        let rep = run_full_training(&mut model, &train_bags, &schedule, &opt, &loss).unwrap();
        for e in &rep.epochs { println!("{:>3} joint ce={:.4} clst={:.4} sep={:.4}", e.epoch, e.mean_cross_entropy, e.mean_cluster, e.mean_separation); }
    }
    let pre = auc(&model);
    println!("[{:.0}s] final AUC: {pre:.4}", t0.elapsed().as_secs_f64());
    if let Ok(dir) = std::env::var("CKPT") {
        let p = std::path::PathBuf::from(dir);
        std::fs::create_dir_all(&p).unwrap();
        protomil::checkpoint::save(&model, &p).unwrap();
        println!("saved checkpoint");
    }
    if std::env::var("PRUNE").is_ok() {
        prune_and_report(&mut model, &train_bags, &opt, &auc);
    }
    println!("[{:.0}s] done", t0.elapsed().as_secs_f64());
}

fn prune_and_report(model: &mut Model, train_bags: &[Bag], opt: &OptimizerConfig, auc: &dyn Fn(&Model) -> f64) {
    let rep = prune_prototypes(model, train_bags, &PruneConfig::default(), opt, 321).unwrap();
    for c in &rep.census {
        let ds: Vec<String> = c.neighbors.iter().map(|n| format!("{:.3e}", n.d2)).collect();
        println!("proto {} class {} own {} other {} d2 [{}]", c.prototype_index, c.prototype_class, c.own_class_count, c.other_class_count, ds.join(", "));
    }
    println!("prune r={:?} survivors={} post-AUC {:.4}", rep.chosen_r, rep.active_after, auc(model));
}
