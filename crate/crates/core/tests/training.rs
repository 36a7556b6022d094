mod common;

use ccdd_core::data::SyntheticSource;
use ccdd_core::denoiser::{Arch, Denoiser};
use ccdd_core::embedder::{Codebook, CodebookMode};
use ccdd_core::rng::SeedStream;
use ccdd_core::session::Session;
use ccdd_core::training::{loss_and_grad, train_step, LossWeights, OptimizerState, TrainConfig};
use common::{generic_model, small_run, tiny_config};

fn setup(arch: Arch) -> (Denoiser, Codebook, ccdd_core::TokenBatch) {
    let cfg = tiny_config(arch);
    let model = generic_model(cfg.clone(), 21);
    let cb = Codebook::build(CodebookMode::RandomOrthonormal, cfg.vocab, cfg.d_latent, SeedStream::new(22)).unwrap();
    let src = SyntheticSource::bigram_ring(cfg.vocab, 0.6, 0.2).unwrap();
    (model, cb, src.sample(6, 5, SeedStream::new(23)))
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (mut model, cb, x0) = setup(Arch::Mdit);
    let cfg = TrainConfig::default();
    let stream = SeedStream::new(24);
    let (_, grads, _) = loss_and_grad(&model, &cb, &x0, stream, &cfg).unwrap();
    let h = 1e-5;
    for name in ["head.logits.w", "head.eps.w", "blocks.0.ada.w", "tok_embed"] {
        let i = model.params.index_of(name).unwrap_or_else(|| panic!("missing {name}"));
        for k in [0usize, 3, 7] {
            let orig = model.params.get(i).value.data[k];
            model.params.value_mut(i).data[k] = orig + h;
            let up = loss_and_grad(&model, &cb, &x0, stream, &cfg).unwrap().0.total;
            model.params.value_mut(i).data[k] = orig - h;
            let down = loss_and_grad(&model, &cb, &x0, stream, &cfg).unwrap().0.total;
            model.params.value_mut(i).data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads.blocks[i][k];
            assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}[{k}]: {g} vs {fd}");
        }
    }
}

#[test]
fn zero_weight_heads_get_no_gradient() {
    let (model, cb, x0) = setup(Arch::Mmdit);
    let logits = model.params.index_of("head.logits.w").unwrap();
    let eps = model.params.index_of("head.eps.w").unwrap();
    let only_cont = TrainConfig { weights: LossWeights { gamma_disc: 0.0, ..Default::default() }, ..Default::default() };
    let (loss, g, _) = loss_and_grad(&model, &cb, &x0, SeedStream::new(1), &only_cont).unwrap();
    assert!(g.blocks[logits].iter().all(|&v| v == 0.0));
    assert!(g.blocks[eps].iter().any(|&v| v != 0.0));
    assert_eq!(loss.total, loss.l_cont);
    let only_disc = TrainConfig { weights: LossWeights { gamma_cont: 0.0, ..Default::default() }, ..Default::default() };
    let (loss2, g, _) = loss_and_grad(&model, &cb, &x0, SeedStream::new(1), &only_disc).unwrap();
    assert!(g.blocks[eps].iter().all(|&v| v == 0.0));
    assert_eq!(loss2.total, loss2.l_disc);
    // Both runs see the same corruption, so the component losses agree.
    assert_eq!(loss.l_disc, loss2.l_disc);
    assert_eq!(loss.l_cont, loss2.l_cont);
}

#[test]
fn parallel_chunks_match_the_serial_step() {
    let (model, cb, x0) = setup(Arch::Moedit);
    let serial = TrainConfig::default();
    let parallel = TrainConfig { workers: 3, ..Default::default() };
    let (a, ga, _) = loss_and_grad(&model, &cb, &x0, SeedStream::new(2), &serial).unwrap();
    let (b, gb, _) = loss_and_grad(&model, &cb, &x0, SeedStream::new(2), &parallel).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    for (x, y) in ga.blocks.iter().flatten().zip(gb.blocks.iter().flatten()) {
        assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
    }
    let (c, gc, _) = loss_and_grad(&model, &cb, &x0, SeedStream::new(2), &parallel).unwrap();
    assert_eq!(b, c);
    assert_eq!(gb, gc);
}

#[test]
fn steps_are_deterministic() {
    let (model, cb, x0) = setup(Arch::Mdit);
    let cfg = TrainConfig::default();
    let run = || {
        let mut m = model.clone();
        let mut opt = OptimizerState::new(&m.params);
        let reports: Vec<_> = (0..3).map(|s| train_step(&mut m, &mut opt, &cb, &x0, SeedStream::new(s), &cfg).unwrap()).collect();
        (m, reports)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_ne!(m1, model);
}

#[test]
fn clipping_caps_the_update() {
    let (model, cb, x0) = setup(Arch::Mdit);
    let mut cfg = TrainConfig::default();
    cfg.optimizer.grad_clip = 1e-3;
    cfg.optimizer.warmup_steps = 0;
    let mut m = model.clone();
    let mut opt = OptimizerState::new(&m.params);
    let r = train_step(&mut m, &mut opt, &cb, &x0, SeedStream::new(3), &cfg).unwrap();
    assert!(r.grad_norm > 1e-3);
    // The first Adam step moves each coordinate by at most lr, plus the decoupled decay.
    let max_move = m
        .params
        .iter()
        .zip(model.params.iter())
        .flat_map(|(a, b)| {
            a.value.data.iter().zip(&b.value.data).map(|(x, y)| (x - y).abs() - cfg.optimizer.lr * cfg.optimizer.weight_decay * y.abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    assert!(max_move <= cfg.optimizer.lr * (1.0 + 1e-9), "{max_move}");
}

#[test]
fn loss_decreases_on_periodic_data() {
    let cfg = small_run(&[("source", "periodic"), ("periodic_pattern", "0,1,2,3,4,5,6,7"), ("train_steps", "100")]);
    let mut s = Session::new(cfg).unwrap();
    let losses: Vec<f64> = (0..100).map(|_| s.train_step().unwrap().loss.l_disc).collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn bad_weights_are_rejected() {
    let (model, cb, x0) = setup(Arch::Mdit);
    let cfg = TrainConfig { weights: LossWeights { gamma_cont: -1.0, ..Default::default() }, ..Default::default() };
    let err = loss_and_grad(&model, &cb, &x0, SeedStream::new(1), &cfg).unwrap_err();
    assert!(err.to_string().contains("gamma_cont"));
}
