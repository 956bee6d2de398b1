use tte_core::trainer::*;
use tte_core::Result;

/// Replays a fixed validation-loss curve. The "weights" are just the epoch
/// number, so restoring is observable.
struct Scripted {
    val: Box<dyn Fn(usize) -> f64>,
    weights: usize,
    saved: Option<usize>,
    calls: usize,
}

impl Scripted {
    fn new(val: impl Fn(usize) -> f64 + 'static) -> Self {
        Self {
            val: Box::new(val),
            weights: 0,
            saved: None,
            calls: 0,
        }
    }
}

impl EpochRunner for Scripted {
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        self.calls += 1;
        self.weights = epoch;
        Ok((1.0, (self.val)(epoch)))
    }
    fn save_best(&mut self) {
        self.saved = Some(self.weights);
    }
    fn restore_best(&mut self) -> Result<()> {
        if let Some(w) = self.saved {
            self.weights = w;
        }
        Ok(())
    }
}

#[test]
fn constant_loss_stops_after_patience() {
    let mut r = Scripted::new(|_| 0.7);
    let h = run_epochs(&TrainConfig::default(), &mut r).unwrap();
    assert_eq!(h.stopped_epoch, 11);
    assert_eq!(h.best_epoch, 1);
    assert_eq!(r.calls, 11);
    assert_eq!(h.val_loss.len(), 11);
}

#[test]
fn improving_loss_runs_every_epoch() {
    let mut r = Scripted::new(|e| 10.0 - 0.05 * e as f64);
    let h = run_epochs(&TrainConfig::default(), &mut r).unwrap();
    assert_eq!(h.stopped_epoch, 100);
    assert_eq!(h.best_epoch, 100);
    assert_eq!(r.calls, 100);
}

#[test]
fn improvements_below_min_delta_do_not_count() {
    // dips of 0.005 are under the 0.01 threshold
    let mut r = Scripted::new(|e| if e % 2 == 0 { 0.995 } else { 1.0 });
    let h = run_epochs(&TrainConfig::default(), &mut r).unwrap();
    assert_eq!(h.best_epoch, 1);
    assert_eq!(h.stopped_epoch, 11);
}

#[test]
fn best_weights_are_restored() {
    let curve = [1.0, 0.5, 0.3, 0.6, 0.6, 0.7, 0.8];
    let mut r = Scripted::new(move |e| curve.get(e - 1).copied().unwrap_or(0.9));
    let config = TrainConfig {
        patience: 4,
        ..TrainConfig::default()
    };
    let h = run_epochs(&config, &mut r).unwrap();
    assert_eq!((h.best_epoch, h.stopped_epoch), (3, 7));
    assert_eq!(h.best_val_loss, 0.3);
    assert_eq!(r.weights, 3);
}

#[test]
fn stop_is_never_more_than_patience_after_best() {
    for seed in 0..50u64 {
        let mut r = Scripted::new(move |e| {
            let x = (e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed;
            (x % 1000) as f64 / 1000.0
        });
        let config = TrainConfig {
            patience: 1 + (seed % 7) as usize,
            ..TrainConfig::default()
        };
        let h = run_epochs(&config, &mut r).unwrap();
        assert!(h.stopped_epoch - h.best_epoch <= config.patience);
        assert!(h.stopped_epoch <= config.max_epochs);
        assert_eq!(r.weights, h.best_epoch);
    }
}

#[test]
fn bad_configs_rejected() {
    for config in [
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            min_delta: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(run_epochs(&config, &mut Scripted::new(|_| 1.0)).is_err());
    }
}

#[test]
fn early_stopping_counts_stale_epochs() {
    let mut s = EarlyStopping::new(2, 0.0);
    assert_eq!(s.update(1, 1.0), (true, Decision::Continue));
    assert_eq!(s.update(2, 1.0), (false, Decision::Continue));
    assert_eq!(s.update(3, 1.0), (false, Decision::Stop));
}

#[test]
fn batches_cover_every_index_once() {
    let idx: Vec<usize> = (0..300).collect();
    let b = make_batches(&idx, 128);
    assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), [128, 128, 44]);
    let flat: Vec<usize> = b.concat();
    assert_eq!(flat, idx);
    // a lone trailing row joins the batch before it
    let idx: Vec<usize> = (0..257).collect();
    let b = make_batches(&idx, 128);
    assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), [128, 129]);
    assert_eq!(b.concat(), idx);
}

#[test]
fn argmax_prefers_the_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}
