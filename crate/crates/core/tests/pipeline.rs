use csi_core::channel_sim::{derive_seed, generate_scenario};
use csi_core::harness::{cmd_evaluate, cmd_generate, cmd_train, DataLoader, ExperimentConfig, RawSplits, Split};
use csi_core::metrics::{evaluate_pairs, nmse};
use csi_core::{ChannelMatrix, DatasetFile, ProjectionCodec, RefinerModel, ScenarioArea, SystemDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(out: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "n_tx = 4\nn_sub = 8\ngamma = 4\nvariant = llm\nn_layers = 1\nn_heads = 2\nd_em = 16\nd_ff = 32\n\
         small_hidden = 32\nsamples_per_scenario = 40\nsample_sweep = 10,full\ntrain_scenarios = 1-2\neval_scenarios = 3-3\n\
         batch_size = 8\nmicro_batch = 4\nepochs = 3\nout_dir = {}\n",
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn dataset_file_survives_disk_round_trip() {
    let dims = SystemDims::new(8, 16).unwrap();
    let area = ScenarioArea::new(3, 11).unwrap();
    let file = generate_scenario(&area, &dims, 5, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csid");
    file.save(&path).unwrap();
    let back = DatasetFile::load(&path).unwrap();
    assert_eq!(back.to_bytes(), file.to_bytes());
    for i in 0..5 {
        assert!(back.sample(i).unwrap().bit_eq(&file.sample(i).unwrap()));
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(DatasetFile::from_bytes(&bytes).is_err());
}

#[test]
fn generated_samples_do_not_depend_on_batch_size() {
    let dims = SystemDims::new(8, 16).unwrap();
    let area = ScenarioArea::new(2, 5).unwrap();
    let few = generate_scenario(&area, &dims, 3, 5).unwrap();
    let many = generate_scenario(&area, &dims, 9, 5).unwrap();
    for i in 0..3 {
        assert!(few.sample(i).unwrap().bit_eq(&many.sample(i).unwrap()));
    }
}

#[test]
fn square_orthonormal_codec_is_lossless() {
    let dims = SystemDims::new(8, 8).unwrap();
    let codec = ProjectionCodec::orthonormal(dims, dims.real_len(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(1, 2, 3));
    for _ in 0..10 {
        let h = ChannelMatrix::random(8, 8, &mut rng);
        let back = codec.coarse_reconstruct(&codec.compress(&h).unwrap()).unwrap();
        assert!(nmse(&h, &back).unwrap() < 1e-20);
    }
}

#[test]
fn coarse_error_matches_subspace_fraction() {
    let dims = SystemDims::new(8, 8).unwrap();
    let codec = ProjectionCodec::orthonormal(dims, dims.real_len() / 4, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let hs: Vec<_> = (0..400).map(|_| ChannelMatrix::random(8, 8, &mut rng)).collect();
    let coarse = codec.round_trip_batch(&hs).unwrap();
    let m = evaluate_pairs(hs.iter().zip(&coarse)).unwrap();
    assert!((m.nmse_linear - 0.75).abs() < 0.02, "{}", m.nmse_linear);
}

#[test]
fn model_batch_forward_matches_single_forward() {
    let cfg = tiny_config(std::path::Path::new("unused"));
    let model = RefinerModel::new(cfg.backbone(cfg.variant), 4, 8, 1, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hs: Vec<_> = (0..4).map(|_| ChannelMatrix::random(4, 8, &mut rng)).collect();
    let batch = model.forward_batch(&hs).unwrap();
    for (h, b) in hs.iter().zip(&batch) {
        let single = model.forward_full(h).unwrap();
        let diff = single.zip_map(b, |x, y| x - y).unwrap();
        assert!(diff.frobenius_sq().sqrt() <= 1e-12 * single.frobenius_sq().sqrt());
    }
}

#[test]
fn train_then_evaluate_reports_the_same_checkpoint_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let generated = cmd_generate(&cfg).unwrap();
    assert_eq!(generated.files.len(), 3);

    let run = cmd_train(&cfg).unwrap();
    assert_eq!(run.leaked_reads, 0);
    assert_eq!(run.history.len(), cfg.epochs + 1);
    let best = run
        .history
        .iter()
        .min_by(|a, b| a.val_nmse.partial_cmp(&b.val_nmse).unwrap())
        .unwrap();
    assert_eq!(run.epoch_best, best.epoch);

    let raw = RawSplits::load(&cfg, cfg.train_scenarios, cfg.train_samples_per_scenario).unwrap();
    assert_eq!(raw.train.len() + raw.val.len() + raw.test.len(), 80);
    assert_eq!(run.reads[Split::Test as usize], raw.test.len());

    let results = std::fs::read_to_string(dir.path().join("train/results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,variant,gamma,samples_per_scenario,split,nmse_linear,nmse_db,gcs,epoch_best,seed"
    );
    assert_eq!(lines.count(), 2);

    let rows = cmd_evaluate(&cfg, &run.checkpoint).unwrap();
    let test = rows.iter().find(|r| r.split == "test" && r.variant == "llm").unwrap();
    assert_eq!(test.metric, run.metric("test").unwrap());
    assert!(rows.iter().any(|r| r.split == "transfer" && r.variant == "coarse"));
}

#[test]
fn loader_counts_reads_per_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    let raw = RawSplits::load(&cfg, cfg.train_scenarios, cfg.train_samples_per_scenario).unwrap();
    let codec = csi_core::harness::make_codec(&cfg, cfg.gamma).unwrap();
    let loader = DataLoader::new(&raw, &codec, cfg.patch_size).unwrap();
    loader.batch(Split::Train, &[0, 1, 2]).unwrap();
    loader.batch(Split::Val, &[0]).unwrap();
    assert_eq!(loader.reads(), [3, 1, 0]);
}
