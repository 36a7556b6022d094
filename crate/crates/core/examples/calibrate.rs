//! Trains from `key=value` overrides and prints the validation ELBO periodically.
use std::time::Instant;

use ccdd_core::config::RunConfig;
use ccdd_core::session::Session;

fn main() {
    let pairs: Vec<(String, String)> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let mut cfg = RunConfig::default();
    cfg.apply(&pairs).unwrap();
    let every = cfg.log_every.max(1);
    let mut s = Session::new(cfg.clone()).unwrap();
    let start = Instant::now();
    for step in 1..=cfg.train_steps {
        let r = s.train_step().unwrap();
        if step % every == 0 || step == cfg.train_steps {
            let e = s.evaluate(cfg.eval_p_r).unwrap();
            println!(
                "{step} {:.1}s loss={:.4} disc={:.4} joint={:.4} hw={:.4}",
                start.elapsed().as_secs_f64(),
                r.loss.total,
                e.elbo_disc,
                e.elbo_joint,
                e.half_width_disc
            );
        }
    }
}
