use std::fmt::Write as _;

/// Statistics for one completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    /// `(client_id, loss)` of the global model entering this round, measured
    /// on the client's first local mini-batch.
    pub client_losses: Vec<(usize, f64)>,
    /// Sample-weighted mean of `client_losses`.
    pub global_loss: f64,
    /// Validation metric of the global model after this round.
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

/// One entry per completed round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundStats>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn last_val_metric(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.val_metric)
    }

    /// CSV with header `round,client_id,loss,val_metric,seconds`; the
    /// aggregate row per round uses `client_id = global`. Wall-clock time is
    /// written as `NA` unless `with_timing`, which keeps files reproducible.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("round,client_id,loss,val_metric,seconds\n");
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
        for r in &self.rounds {
            let seconds = if with_timing {
                format!("{:.3}", r.seconds)
            } else {
                "NA".to_owned()
            };
            for (id, loss) in &r.client_losses {
                let _ = writeln!(out, "{},{},{:.6},NA,{}", r.round, id, loss, seconds);
            }
            let _ = writeln!(
                out,
                "{},global,{:.6},{},{}",
                r.round,
                r.global_loss,
                fmt_opt(r.val_metric),
                seconds
            );
        }
        out
    }
}
