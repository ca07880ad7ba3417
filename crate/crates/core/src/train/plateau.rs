/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub counter: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub lr: f64,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            best: f64::INFINITY,
            counter: 0,
            factor: 0.5,
            patience: 5,
            min_delta: 1e-3,
            lr,
        }
    }

    /// Feeds one epoch's validation loss. Returns true when the rate was reduced.
    ///
    /// Improvement requires `best - loss > min_delta` strictly. The counter
    /// restarts after each reduction.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if self.best - val_loss > self.min_delta {
            self.best = val_loss;
            self.counter = 0;
            return false;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            self.lr *= self.factor;
            self.counter = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_after_five_flat_epochs() {
        let mut s = PlateauState::new(1e-3);
        let mut changed = vec![s.update(0.5)];
        changed.extend((0..5).map(|_| s.update(0.4995)));
        assert_eq!(changed, [false, false, false, false, false, true]);
        assert_eq!(s.lr, 5e-4);
        assert_eq!(s.counter, 0);
    }

    #[test]
    fn exact_delta_is_not_improvement() {
        let mut s = PlateauState::new(1e-3);
        s.update(0.002);
        s.update(0.001);
        assert_eq!(s.best, 0.002);
        assert_eq!(s.counter, 1);
    }

    #[test]
    fn steady_improvement_keeps_rate() {
        let mut s = PlateauState::new(1e-3);
        for i in 0..40 {
            assert!(!s.update(1.0 - 0.002 * i as f64));
        }
        assert_eq!(s.lr, 1e-3);
    }
}
