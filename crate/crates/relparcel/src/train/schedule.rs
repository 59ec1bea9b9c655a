//! Validation-loss driven learning-rate decay and early stopping.

/// What the training loop should do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleDecision {
    Continue,
    /// Validation loss failed to improve; shrink the learning rate.
    DecayLr,
    /// Validation loss rose for `patience` consecutive epochs; stop.
    Stop,
}

/// Tracks the best validation loss, a strict-increase streak for early
/// stopping, and a no-improvement streak for plateau decay.
#[derive(Clone, Debug)]
pub struct Schedule {
    best: f64,
    prev: f64,
    increase_streak: u32,
    no_improve_streak: u32,
    pub patience: u32,
    pub decay_patience: u32,
    pub decays: u32,
}

impl Schedule {
    pub fn new(patience: u32, decay_patience: u32) -> Self {
        Schedule {
            best: f64::INFINITY,
            prev: f64::INFINITY,
            increase_streak: 0,
            no_improve_streak: 0,
            patience,
            decay_patience,
            decays: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn increase_streak(&self) -> u32 {
        self.increase_streak
    }

    /// Feed one epoch's validation loss.
    pub fn update(&mut self, val_loss: f64) -> ScheduleDecision {
        if val_loss > self.prev {
            self.increase_streak = (self.increase_streak + 1).min(self.patience);
        } else {
            self.increase_streak = 0;
        }
        self.prev = val_loss;

        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.no_improve_streak = 0;
        } else {
            self.no_improve_streak += 1;
        }

        if self.increase_streak >= self.patience {
            return ScheduleDecision::Stop;
        }
        if !improved && self.no_improve_streak >= self.decay_patience {
            self.no_improve_streak = 0;
            self.decays += 1;
            return ScheduleDecision::DecayLr;
        }
        ScheduleDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_consecutive_increases_stop_at_epoch_seven() {
        let mut s = Schedule::new(5, 1);
        let seq = [10.0, 9.0, 9.5, 9.6, 9.7, 9.8, 9.9];
        let mut decisions = Vec::new();
        for v in seq {
            decisions.push(s.update(v));
        }
        assert_eq!(decisions[6], ScheduleDecision::Stop, "stop on the 5th rise");
        assert!(decisions[..6].iter().all(|d| *d != ScheduleDecision::Stop));
        assert_eq!(decisions[2], ScheduleDecision::DecayLr);
    }

    #[test]
    fn strictly_decreasing_losses_never_decay_or_stop() {
        let mut s = Schedule::new(5, 1);
        for i in 0..50 {
            let d = s.update(10.0 - i as f64 * 0.1);
            assert_eq!(d, ScheduleDecision::Continue);
        }
    }

    #[test]
    fn equal_loss_decays_but_breaks_the_increase_streak() {
        let mut s = Schedule::new(5, 1);
        assert_eq!(s.update(5.0), ScheduleDecision::Continue);
        // not an increase, but not an improvement either
        assert_eq!(s.update(5.0), ScheduleDecision::DecayLr);
        assert_eq!(s.increase_streak(), 0);
    }

    #[test]
    fn decay_patience_delays_the_decay() {
        let mut s = Schedule::new(5, 3);
        assert_eq!(s.update(5.0), ScheduleDecision::Continue);
        assert_eq!(s.update(5.1), ScheduleDecision::Continue);
        assert_eq!(s.update(5.1), ScheduleDecision::Continue);
        assert_eq!(s.update(5.1), ScheduleDecision::DecayLr);
    }

    #[test]
    fn improvement_resets_best() {
        let mut s = Schedule::new(5, 1);
        s.update(5.0);
        s.update(6.0);
        s.update(4.0);
        assert_eq!(s.best(), 4.0);
        assert_eq!(s.increase_streak(), 0);
    }
}
