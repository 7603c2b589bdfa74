/// What the schedule decided after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Continue,
    Halved,
    Stop,
}

/// Learning-rate halving on a stalled epoch loss.
///
/// The decrease ratio of epoch `e` is `(loss[e−1] − loss[e]) / loss[e−1]`.
/// A ratio below `threshold` halves the rate; `stop_after` consecutive
/// halvings end the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    threshold: f64,
    stop_after: u32,
    prev: Option<f64>,
    halvings: u32,
    streak: u32,
}

impl LrSchedule {
    pub fn new(lr: f64, threshold: f64, stop_after: u32) -> Self {
        assert!(lr >= 0.0 && lr.is_finite(), "learning rate must be finite and non-negative");
        Self {
            lr,
            threshold,
            stop_after: stop_after.max(1),
            prev: None,
            halvings: 0,
            streak: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Total halvings so far.
    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    /// Current run of consecutive halvings.
    pub fn streak(&self) -> u32 {
        self.streak
    }

    pub fn decrease_ratio(prev: f64, cur: f64) -> f64 {
        (prev - cur) / prev
    }

    pub fn observe(&mut self, epoch_loss: f64) -> ScheduleEvent {
        let prev = self.prev.replace(epoch_loss);
        let Some(prev) = prev else {
            return ScheduleEvent::Continue;
        };
        if Self::decrease_ratio(prev, epoch_loss) < self.threshold {
            self.lr *= 0.5;
            self.halvings += 1;
            self.streak += 1;
            if self.streak >= self.stop_after {
                ScheduleEvent::Stop
            } else {
                ScheduleEvent::Halved
            }
        } else {
            self.streak = 0;
            ScheduleEvent::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_resets_the_streak() {
        let mut s = LrSchedule::new(1.0, 0.01, 2);
        assert_eq!(s.observe(1.0), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.999), ScheduleEvent::Halved);
        assert_eq!(s.observe(0.5), ScheduleEvent::Continue);
        assert_eq!(s.streak(), 0);
        assert_eq!(s.observe(0.6), ScheduleEvent::Halved);
        assert_eq!(s.observe(0.6), ScheduleEvent::Stop);
        assert_eq!(s.halvings(), 3);
        assert_eq!(s.lr(), 0.125);
    }
}
