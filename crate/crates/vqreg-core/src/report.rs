//! Evaluation report: per-sample metric rows plus mean ± std aggregates,
//! rendered as CSV and as a formatted text table.

use crate::stats::mean_std_pop;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub dsc: f64,
    pub cd_mm: f64,
    pub mse: f64,
    pub tre_mm: f64,
    pub neg_jac_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}\u{b1}{:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportAggregates {
    pub dsc: Aggregate,
    pub cd_mm: Aggregate,
    pub mse: Aggregate,
    pub tre_mm: Aggregate,
    pub neg_jac_frac: Aggregate,
}

/// Per-sample and aggregate metrics with the run configuration echoed in.
/// Distances are reported in mm (stated in the notes for clarity).
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<SampleMetrics>,
    pub config_echo: String,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(rows: Vec<SampleMetrics>, config_echo: String) -> Self {
        let notes = vec!["CD and TRE are reported in mm".to_string()];
        Self { rows, config_echo, notes }
    }

    /// Mean and population std recomputed from the per-sample rows.
    pub fn aggregates(&self) -> ReportAggregates {
        let col = |f: fn(&SampleMetrics) -> f64| -> Aggregate {
            let vals: Vec<f64> = self.rows.iter().map(f).collect();
            let (mean, std) = mean_std_pop(&vals);
            Aggregate { mean, std }
        };
        ReportAggregates {
            dsc: col(|r| r.dsc),
            cd_mm: col(|r| r.cd_mm),
            mse: col(|r| r.mse),
            tre_mm: col(|r| r.tre_mm),
            neg_jac_frac: col(|r| r.neg_jac_frac),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,dsc,cd_mm,mse,tre_mm,neg_jac_frac\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_id, r.dsc, r.cd_mm, r.mse, r.tre_mm, r.neg_jac_frac
            ));
        }
        let a = self.aggregates();
        out.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            a.dsc.mean, a.cd_mm.mean, a.mse.mean, a.tre_mm.mean, a.neg_jac_frac.mean
        ));
        out.push_str(&format!(
            "std,{},{},{},{},{}\n",
            a.dsc.std, a.cd_mm.std, a.mse.std, a.tre_mm.std, a.neg_jac_frac.std
        ));
        out
    }

    /// Text table with the DSC / CD / MSE / TRE columns.
    pub fn to_table(&self, title: &str) -> String {
        let a = self.aggregates();
        let mut out = String::new();
        out.push_str(&format!("{title}\n"));
        out.push_str(&format!(
            "{:<24} | {:^13} | {:^13} | {:^13} | {:^13}\n",
            "sample", "DSC", "CD", "MSE", "TRE"
        ));
        out.push_str(&format!("{}\n", "-".repeat(24 + 4 * 16)));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} | {:>13.3} | {:>13.3} | {:>13.3} | {:>13.3}\n",
                r.sample_id, r.dsc, r.cd_mm, r.mse, r.tre_mm
            ));
        }
        out.push_str(&format!("{}\n", "-".repeat(24 + 4 * 16)));
        out.push_str(&format!(
            "{:<24} | {:^13} | {:^13} | {:^13} | {:^13}\n",
            "aggregate",
            a.dsc.format(3),
            a.cd_mm.format(3),
            a.mse.format(3),
            a.tre_mm.format(3)
        ));
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}
