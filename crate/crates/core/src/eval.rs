//! Monte-Carlo symbol error rates, output-norm distributions and the
//! two-sample KS distance used to judge generated channels.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autoencoder::{CodecPair, ModelAwareChannel};
use crate::channels::{ebn0_to_sigma, qam16_constellation, qam16_detect, ChannelModel, EbN0Spec};
use crate::numkit::Tensor;
use crate::rng::{make_rng_stream, SimRng};
use crate::trainer::Surrogate;
use crate::{Error, Result};

/// Samples per message kept for constellation plots.
pub const CONSTELLATION_SAMPLES: usize = 70;

/// Anything that maps messages to channel inputs and channel outputs back
/// to message decisions.
pub trait Link {
    fn messages(&self) -> usize;
    fn block_len(&self) -> usize;
    fn transmit(&self, messages: &[usize]) -> Result<Tensor>;
    fn detect(&self, y: &Tensor) -> Result<Vec<usize>>;
}

impl Link for CodecPair {
    fn messages(&self) -> usize {
        CodecPair::messages(self)
    }

    fn block_len(&self) -> usize {
        CodecPair::block_len(self)
    }

    fn transmit(&self, messages: &[usize]) -> Result<Tensor> {
        self.codebook()?.select_rows(messages)
    }

    fn detect(&self, y: &Tensor) -> Result<Vec<usize>> {
        self.detect_batch(y)
    }
}

/// Uncoded Gray-mapped 16-QAM with minimum-distance detection.
#[derive(Debug, Clone, Copy, Default)]
pub struct Qam16;

impl Link for Qam16 {
    fn messages(&self) -> usize {
        16
    }

    fn block_len(&self) -> usize {
        2
    }

    fn transmit(&self, messages: &[usize]) -> Result<Tensor> {
        qam16_constellation().select_rows(messages)
    }

    fn detect(&self, y: &Tensor) -> Result<Vec<usize>> {
        Ok((0..y.rows()).map(|i| qam16_detect(y.row(i))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerRow {
    pub ebn0_db: f64,
    pub num_symbols: u64,
    pub num_errors: u64,
    pub ser: f64,
    /// `√(ser(1 − ser)/num_symbols)`.
    pub stderr: f64,
}

impl SerRow {
    pub fn new(ebn0_db: f64, num_symbols: u64, num_errors: u64) -> Self {
        let ser = if num_symbols == 0 {
            0.0
        } else {
            num_errors as f64 / num_symbols as f64
        };
        let stderr = if num_symbols == 0 {
            0.0
        } else {
            (ser * (1.0 - ser) / num_symbols as f64).sqrt()
        };
        Self {
            ebn0_db,
            num_symbols,
            num_errors,
            ser,
            stderr,
        }
    }

    /// `ser ± 3·stderr`, clamped to `[0, 1]`.
    pub fn interval(&self) -> (f64, f64) {
        (
            (self.ser - 3.0 * self.stderr).max(0.0),
            (self.ser + 3.0 * self.stderr).min(1.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SerTable {
    pub rows: Vec<SerRow>,
}

impl SerTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ebn0_db,num_symbols,num_errors,ser,stderr\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:e},{:e}",
                r.ebn0_db, r.num_symbols, r.num_errors, r.ser, r.stderr
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn row(&self, ebn0_db: f64) -> Option<&SerRow> {
        self.rows.iter().find(|r| r.ebn0_db == ebn0_db)
    }
}

/// Stop rule: keep simulating until both `min_symbols` and `min_errors`
/// are reached, or `max_symbols` have been sent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub min_symbols: u64,
    pub min_errors: u64,
    pub max_symbols: u64,
    pub chunk: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            min_symbols: 100_000,
            min_errors: 100,
            max_symbols: 10_000_000,
            chunk: 20_000,
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.min_symbols < 10_000 {
            return Err(Error::InvalidArgument(format!(
                "min_symbols must be at least 1e4, got {}",
                self.min_symbols
            )));
        }
        if self.chunk == 0 || self.max_symbols < self.min_symbols {
            return Err(Error::InvalidArgument("bad sweep chunk or symbol cap".into()));
        }
        Ok(())
    }
}

/// SER of `link` over `channel` at noise level `sigma`; the row is labelled
/// `ebn0_db`.
pub fn ser_point<L: Link + ?Sized>(
    link: &L,
    channel: ChannelModel,
    ebn0_db: f64,
    sigma: f64,
    cfg: SweepConfig,
    rng: &mut SimRng,
) -> Result<SerRow> {
    cfg.validate()?;
    let m = link.messages();
    let (mut sent, mut errors) = (0u64, 0u64);
    while sent < cfg.max_symbols && (sent < cfg.min_symbols || errors < cfg.min_errors) {
        let count = (cfg.max_symbols - sent).min(cfg.chunk as u64) as usize;
        let msgs: Vec<usize> = (0..count).map(|_| rng.random_range(0..m)).collect();
        let x = link.transmit(&msgs)?;
        let (y, _) = channel.apply(&x, sigma, rng)?;
        let decided = link.detect(&y)?;
        errors += msgs.iter().zip(&decided).filter(|(a, b)| a != b).count() as u64;
        sent += count as u64;
    }
    Ok(SerRow::new(ebn0_db, sent, errors))
}

/// SER at each Eb/N0 in `ebn0_list`, each point on its own stream
/// `ser.{db}` of `seed`.
pub fn ser_sweep<L: Link + ?Sized>(
    link: &L,
    channel: ChannelModel,
    ebn0_list: &[f64],
    cfg: SweepConfig,
    seed: u64,
) -> Result<SerTable> {
    ser_sweep_with(link, channel, ebn0_list, cfg, seed, |db| {
        Ok(ebn0_to_sigma(EbN0Spec::for_code(db, link.messages(), link.block_len())?))
    })
}

/// [`ser_sweep`] with an explicit dB-to-sigma map.
pub fn ser_sweep_with<L: Link + ?Sized>(
    link: &L,
    channel: ChannelModel,
    ebn0_list: &[f64],
    cfg: SweepConfig,
    seed: u64,
    sigma_for: impl Fn(f64) -> Result<f64>,
) -> Result<SerTable> {
    let mut rows = Vec::with_capacity(ebn0_list.len());
    for &db in ebn0_list {
        let mut rng = make_rng_stream(seed, &format!("ser.{db}"));
        rows.push(ser_point(link, channel, db, sigma_for(db)?, cfg, &mut rng)?);
    }
    Ok(SerTable { rows })
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic two-sample KS critical value at level `alpha`.
pub fn ks_critical_value(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Empirical CDF and histogram of a scalar sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfSummary {
    pub sorted: Vec<f64>,
    /// `cumulative[i] = (i + 1) / len`.
    pub cumulative: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EcdfSummary {
    pub fn from_samples(samples: &[f64], bins: usize) -> Result<Self> {
        if samples.is_empty() || bins == 0 {
            return Err(Error::InvalidArgument("ECDF needs samples and at least one bin".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ECDF sample".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let cumulative = (1..=n).map(|i| i as f64 / n as f64).collect();
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let bin_edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in &sorted {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self {
            sorted,
            cumulative,
            bin_edges,
            counts,
        })
    }

    /// `F(x)`: fraction of samples `≤ x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageFidelity {
    pub message: usize,
    pub ks: f64,
    /// `‖mean_gen − mean_true‖`.
    pub mean_error: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub per_message: Vec<MessageFidelity>,
    pub norms_true: Vec<Vec<f64>>,
    pub norms_generated: Vec<Vec<f64>>,
    pub constellation_true: Vec<Tensor>,
    pub constellation_generated: Vec<Tensor>,
}

impl FidelityReport {
    pub fn max_ks(&self) -> f64 {
        self.per_message.iter().map(|m| m.ks).fold(0.0, f64::max)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("message,ks,mean_error,cov_error\n");
        for m in &self.per_message {
            writeln!(out, "{},{:e},{:e},{:e}", m.message, m.ks, m.mean_error, m.cov_error).unwrap();
        }
        out
    }
}

/// `message,sample_idx,norm`.
pub fn norms_csv(norms: &[Vec<f64>]) -> String {
    let mut out = String::from("message,sample_idx,norm\n");
    for (m, row) in norms.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            writeln!(out, "{m},{i},{v:e}").unwrap();
        }
    }
    out
}

/// `message,dim0,…,dim{n−1}`.
pub fn constellation_csv(points: &[Tensor]) -> String {
    let n = points.first().map_or(0, Tensor::cols);
    let mut out = String::from("message");
    for d in 0..n {
        write!(out, ",dim{d}").unwrap();
    }
    out.push('\n');
    for (m, t) in points.iter().enumerate() {
        for i in 0..t.rows() {
            write!(out, "{m}").unwrap();
            for v in t.row(i) {
                write!(out, ",{v:e}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn mean_cov(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, n) = (x.rows() as f64, x.cols());
    let mean: Vec<f64> = x.column_sums().iter().map(|s| s / rows).collect();
    let mut cov = vec![0.0; n * n];
    for i in 0..x.rows() {
        let r = x.row(i);
        for a in 0..n {
            for b in 0..n {
                cov[a * n + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = (rows - 1.0).max(1.0);
    cov.iter_mut().for_each(|c| *c /= denom);
    (mean, cov)
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Compares surrogate outputs with true channel outputs for every codeword
/// in `codebook`, `samples_per_message` draws each. Streams `fidelity.true`
/// and `fidelity.gen` of `seed` drive the two sides.
pub fn channel_fidelity_report(
    truth: &ModelAwareChannel,
    surrogate: &Surrogate,
    codebook: &Tensor,
    samples_per_message: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if samples_per_message < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1e3 samples per message, got {samples_per_message}"
        )));
    }
    let mut rng_true = make_rng_stream(seed, "fidelity.true");
    let mut rng_gen = make_rng_stream(seed, "fidelity.gen");
    let keep = CONSTELLATION_SAMPLES.min(samples_per_message);
    let mut report = FidelityReport {
        per_message: Vec::new(),
        norms_true: Vec::new(),
        norms_generated: Vec::new(),
        constellation_true: Vec::new(),
        constellation_generated: Vec::new(),
    };
    for m in 0..codebook.rows() {
        let msgs = vec![m; samples_per_message];
        let fm = codebook.select_rows(&msgs)?;
        let (y_true, _) = truth.model.apply(&fm, truth.sigma, &mut rng_true)?;
        let y_gen = surrogate.sample(&fm, &msgs, &mut rng_gen)?;
        let n_true: Vec<f64> = y_true.row_sq_norms().iter().map(|s| s.sqrt()).collect();
        let n_gen: Vec<f64> = y_gen.row_sq_norms().iter().map(|s| s.sqrt()).collect();
        let (mu_t, cov_t) = mean_cov(&y_true);
        let (mu_g, cov_g) = mean_cov(&y_gen);
        report.per_message.push(MessageFidelity {
            message: m,
            ks: ks_statistic(&n_true, &n_gen)?,
            mean_error: l2_diff(&mu_t, &mu_g),
            cov_error: l2_diff(&cov_t, &cov_g),
        });
        let first: Vec<usize> = (0..keep).collect();
        report.constellation_true.push(y_true.select_rows(&first)?);
        report.constellation_generated.push(y_gen.select_rows(&first)?);
        report.norms_true.push(n_true);
        report.norms_generated.push(n_gen);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = make_rng_stream(seed, "ks");
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + shift
            })
            .collect()
    }

    #[test]
    fn ks_examples() {
        let a = normals(1, 10_000, 0.0);
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        let far = normals(2, 10_000, 10.0);
        assert!(ks_statistic(&a, &far).unwrap() > 0.999);
        let b = normals(3, 10_000, 0.0);
        let d = ks_statistic(&a, &b).unwrap();
        assert!(d < 0.025, "{d}");
        assert_eq!(d, ks_statistic(&b, &a).unwrap());
        assert!(ks_statistic(&a, &[]).is_err());
    }

    #[test]
    fn ks_handles_ties() {
        let a = [1.0, 1.0, 2.0, 2.0];
        let b = [1.0, 2.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn critical_value_matches_table() {
        // c(0.01) = 1.628 for the two-sample test.
        let c = ks_critical_value(10_000, 10_000, 0.01);
        assert!((c - 1.6276 * (2.0f64 / 10_000.0).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn ecdf_is_monotone_and_reaches_one() {
        let s = EcdfSummary::from_samples(&normals(4, 1000, 0.0), 20).unwrap();
        assert!(s.cumulative.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*s.cumulative.last().unwrap(), 1.0);
        assert_eq!(s.counts.iter().sum::<usize>(), 1000);
        assert_eq!(s.cdf(f64::INFINITY), 1.0);
        assert_eq!(s.cdf(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn noiseless_channel_has_zero_ser() {
        let cfg = SweepConfig {
            min_symbols: 10_000,
            max_symbols: 30_000,
            ..SweepConfig::default()
        };
        // No errors ever arrive, so each point runs to the cap.
        let t = ser_sweep_with(&Qam16, ChannelModel::Awgn, &[1.0, 2.0], cfg, 0, |_| Ok(0.0)).unwrap();
        for r in &t.rows {
            assert_eq!(r.num_errors, 0);
            assert_eq!(r.num_symbols, 30_000);
        }
        assert!(t.to_csv().starts_with("ebn0_db,num_symbols,num_errors,ser,stderr\n1,30000,0,0e0,0e0\n"));
    }

    struct Guesser(std::cell::RefCell<SimRng>);

    impl Link for Guesser {
        fn messages(&self) -> usize {
            16
        }
        fn block_len(&self) -> usize {
            2
        }
        fn transmit(&self, messages: &[usize]) -> Result<Tensor> {
            Qam16.transmit(messages)
        }
        fn detect(&self, y: &Tensor) -> Result<Vec<usize>> {
            let mut rng = self.0.borrow_mut();
            Ok((0..y.rows()).map(|_| rng.random_range(0..16)).collect())
        }
    }

    #[test]
    fn random_guesser_ser_is_fifteen_sixteenths() {
        let g = Guesser(std::cell::RefCell::new(make_rng_stream(0, "guess")));
        let cfg = SweepConfig {
            min_symbols: 100_000,
            ..SweepConfig::default()
        };
        let row = ser_sweep(&g, ChannelModel::Awgn, &[5.0], cfg, 1).unwrap().rows[0];
        let p = 15.0 / 16.0;
        let se = (p * (1.0 - p) / row.num_symbols as f64).sqrt();
        assert!((row.ser - p).abs() < 3.0 * se, "{}", row.ser);
    }

    #[test]
    fn stop_rule_waits_for_errors() {
        let cfg = SweepConfig {
            min_symbols: 10_000,
            min_errors: 100,
            max_symbols: 200_000,
            chunk: 10_000,
        };
        // Around 1e-3 SER: needs far more than 1e4 symbols for 100 errors.
        let row = ser_point(&Qam16, ChannelModel::Awgn, 0.0, 0.1, cfg, &mut make_rng_stream(0, "s")).unwrap();
        assert!(row.num_errors >= 100 || row.num_symbols == 200_000);
        assert!(row.num_symbols > 10_000);
    }

    #[test]
    fn self_comparison_passes_calibration() {
        let truth = ModelAwareChannel::new(ChannelModel::Awgn, 0.28117);
        let report = channel_fidelity_report(
            &truth,
            &Surrogate::ModelAware(truth),
            &qam16_constellation(),
            10_000,
            7,
        )
        .unwrap();
        let crit = ks_critical_value(10_000, 10_000, 0.001);
        assert!(report.max_ks() < crit, "{}", report.max_ks());
        assert_eq!(report.constellation_true[0].rows(), CONSTELLATION_SAMPLES);
        let csv = constellation_csv(&report.constellation_generated);
        assert!(csv.starts_with("message,dim0,dim1\n0,"));
        assert_eq!(csv.lines().count(), 1 + 16 * CONSTELLATION_SAMPLES);
        assert!(norms_csv(&report.norms_true).starts_with("message,sample_idx,norm\n0,0,"));
    }
}
