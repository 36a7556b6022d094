mod common;

use ccdd_core::checkpoint::{Checkpoint, CheckpointError};
use ccdd_core::session::Session;
use ccdd_core::Error;
use common::small_run;

fn csv(reports: &[ccdd_core::training::StepReport]) -> Vec<String> {
    reports.iter().map(|r| r.csv_row()).collect()
}

#[test]
fn resume_reproduces_the_straight_run() {
    let cfg = small_run(&[("arch", "mmdit")]);
    let mut straight = Session::new(cfg.clone()).unwrap();
    let full: Vec<_> = (0..20).map(|_| straight.train_step().unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ccdd");
    let mut first = Session::new(cfg.clone()).unwrap();
    let mut resumed: Vec<_> = (0..10).map(|_| first.train_step().unwrap()).collect();
    first.to_checkpoint().save(&path).unwrap();
    drop(first);
    let mut second = Session::resume(cfg, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(second.step, 10);
    resumed.extend((0..10).map(|_| second.train_step().unwrap()));

    assert_eq!(csv(&full), csv(&resumed));
    assert_eq!(straight.model, second.model);
    assert_eq!(straight.optimizer, second.optimizer);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = small_run(&[]);
    let mut s = Session::new(cfg).unwrap();
    s.train_step().unwrap();
    let ckpt = s.to_checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic));
    let mut newer = bytes;
    newer[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(CheckpointError::VersionMismatch { found: 9, .. })));
}

#[test]
fn mismatched_config_names_the_keys() {
    let cfg = small_run(&[]);
    let s = Session::new(cfg.clone()).unwrap();
    let ckpt = s.to_checkpoint();
    let mut other = cfg.clone();
    other.apply(&[("d_model".into(), "32".into()), ("lr".into(), "0.1".into())]).unwrap();
    match Session::resume(other, &ckpt) {
        Err(Error::Checkpoint(CheckpointError::ConfigMismatch(keys))) => {
            assert!(keys.contains("d_model") && keys.contains("lr"), "{keys}");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("resume should fail"),
    }
    // Inference and run-control keys may differ freely.
    let mut relaxed = cfg;
    relaxed.apply(&[("seed".into(), "99".into()), ("sample_steps".into(), "8".into())]).unwrap();
    assert!(Session::resume(relaxed, &ckpt).is_ok());
}

#[test]
fn restored_session_samples_and_evaluates_like_the_original() {
    let cfg = small_run(&[("sample_steps", "4"), ("sample_count", "3"), ("eval_mc_times", "2")]);
    let mut s = Session::new(cfg).unwrap();
    for _ in 0..3 {
        s.train_step().unwrap();
    }
    let mut r = Session::from_checkpoint(&s.to_checkpoint(), &[]).unwrap();
    assert_eq!(s.sample().unwrap(), r.sample().unwrap());
    assert_eq!(s.evaluate(1.0).unwrap(), r.evaluate(1.0).unwrap());
    let samples = r.sample().unwrap().tokens;
    let nll = r.generative_nll(&samples).unwrap();
    assert!(nll.is_finite() && nll > 0.0);
}

#[test]
fn corpus_runs_keep_their_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    std::fs::write(&path, "the cat sat on the mat\n".repeat(40)).unwrap();
    let p = path.to_string_lossy().to_string();
    let cfg = small_run(&[("source", "corpus"), ("corpus_path", &p), ("tokenizer", "char")]);
    let mut s = Session::new(cfg).unwrap();
    s.train_step().unwrap();
    let vocab = s.vocabulary.clone().unwrap();
    assert_eq!(vocab.size(), 11);
    let r = Session::from_checkpoint(&s.to_checkpoint(), &[]).unwrap();
    assert_eq!(r.vocabulary, Some(vocab.clone()));
    let ids = vocab.encode(b"the mat").unwrap();
    assert_eq!(r.detokenize(&ids), "the mat");
}

#[test]
fn data_batches_are_stateless() {
    let cfg = small_run(&[]);
    let mut a = Session::new(cfg.clone()).unwrap();
    let root = ccdd_core::rng::SeedStream::new(cfg.seed);
    let b5 = a.data().unwrap().train_batch(5, 8, root).unwrap();
    let again = a.data().unwrap().train_batch(5, 8, root).unwrap();
    let other = a.data().unwrap().train_batch(6, 8, root).unwrap();
    assert_eq!(b5, again);
    assert_ne!(b5, other);
    assert_eq!(a.validation().unwrap(), a.validation().unwrap());
}
