use tdec::cli::metrics_csv;
use tdec::data::{make_blobs, BlobSpec};
use tdec::metrics::{accuracy, nmi};
use tdec::model::ModelConfig;
use tdec::trainer::{RunConfig, TrainReport, Trainer};

fn small_run(seed: u64, tweak: impl Fn(&mut RunConfig)) -> (Vec<usize>, TrainReport) {
    let data = make_blobs(&BlobSpec::ring(3, 40, 0.1, 2.0, 64, seed)).unwrap();
    let mut mc = ModelConfig::new(data.grid().unwrap());
    mc.hidden = vec![32, 32];
    mc.reduction_hidden = vec![16];
    mc.embed_dim = 6;
    mc.encoder_blocks = 1;
    let mut rc = RunConfig {
        clusters: 3,
        k: 8,
        lr: 0.001,
        batch_size: 32,
        pretrain_epochs: 30,
        max_iter: 30,
        seed,
        augment: false,
        ..Default::default()
    };
    tweak(&mut rc);
    let mut t = Trainer::new(mc, rc).unwrap();
    t.pretrain(&data).unwrap();
    let report = t.train(&data).unwrap();
    (data.labels.unwrap(), report)
}

#[test]
fn small_blobs_are_recovered() {
    let (truth, report) = small_run(0, |_| {});
    let acc = accuracy(&report.labels, &truth).unwrap();
    let score = nmi(&report.labels, &truth).unwrap();
    assert!(acc >= 0.9, "acc {}", acc);
    assert!(score >= 0.7, "nmi {}", score);
    assert_eq!(report.embeddings.z_v.shape(), &[120, 2]);
    assert_eq!(report.state.q.shape(), &[120, 3]);
}

#[test]
fn records_follow_the_stop_rule() {
    let (_, report) = small_run(1, |_| {});
    let recs = &report.records;
    assert_eq!(recs[0].iter, 1);
    assert_eq!(recs[0].label_change, 1.0);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.iter, i + 1);
        assert!(r.acc.is_some() && r.nmi.is_some());
        assert!(r.losses.l_total.is_finite());
    }
    let last = recs.last().unwrap();
    if report.converged {
        assert!(last.label_change <= 0.001);
        assert!(recs[..recs.len() - 1].iter().skip(1).all(|r| r.label_change > 0.001));
    } else {
        assert_eq!(recs.len(), 31);
    }
}

#[test]
fn epsilon_one_stops_at_the_second_iteration() {
    let (_, report) = small_run(2, |c| c.epsilon = 1.0);
    assert!(report.converged);
    assert_eq!(report.records.len(), 2);
}

#[test]
fn zero_alpha_and_beta_still_train() {
    let (truth, report) = small_run(3, |c| {
        c.alpha = 0.0;
        c.beta = 0.0;
        c.max_iter = 5;
    });
    assert_eq!(report.labels.len(), truth.len());
    assert!(report.records.iter().all(|r| r.losses.l_clu >= 0.0 && r.losses.l_dim >= 0.0));
}

#[test]
fn ablations_run_end_to_end() {
    for flip in [
        (|c: &mut RunConfig| c.use_transformer = false) as fn(&mut RunConfig),
        |c| c.use_clustering_head = false,
        |c| c.use_dim_reduction = false,
    ] {
        let (truth, report) = small_run(4, |c| {
            flip(c);
            c.max_iter = 5;
        });
        assert_eq!(report.labels.len(), truth.len());
        assert!(report.records.iter().all(|r| r.losses.l_total.is_finite()));
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let a = small_run(5, |c| c.max_iter = 4).1;
    let b = small_run(5, |c| c.max_iter = 4).1;
    assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
    assert_eq!(a.labels, b.labels);
}
