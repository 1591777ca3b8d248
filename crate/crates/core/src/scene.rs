//! Scene synthesis and TOA/TDOA measurement models.
//!
//! A [`Scene`] holds microphone and source positions together with the
//! microphone start times `delta` and source emission times `eta`. The
//! measurement functions turn a scene into the matrices the estimator
//! consumes: a TOA matrix, or a TDOA matrix reinterpreted as pseudo-TOA.

use nalgebra::{DMatrix, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of sound used by the simulation protocol, in m/s.
pub const SPEED_OF_SOUND: f64 = 340.0;

/// Largest first-row magnitude accepted as "zero" in a TDOA matrix.
pub const TDOA_FIRST_ROW_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub mic_positions: Vec<[f64; 3]>,
    pub src_positions: Vec<[f64; 3]>,
    /// Microphone start times in seconds.
    pub delta: Vec<f64>,
    /// Source emission times in seconds, `eta[0] == 0`.
    pub eta: Vec<f64>,
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Scene {
    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn num_sources(&self) -> usize {
        self.src_positions.len()
    }

    /// Distance between microphone `i` and source `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let r = Vector3::from(self.mic_positions[i]);
        let s = Vector3::from(self.src_positions[j]);
        (r - s).norm()
    }

    pub fn offsets(&self) -> TimingOffsets {
        TimingOffsets {
            delta: self.delta.clone(),
            eta: self.eta.clone(),
        }
    }

    /// `-2 R^T S / c^2` with `R`, `S` the positions relative to microphone 1
    /// and source 1. Equals `D + U` at the true offsets.
    pub fn geometry_product(&self) -> DMatrix<f64> {
        let m = self.num_mics();
        let n = self.num_sources();
        let r0 = Vector3::from(self.mic_positions[0]);
        let s0 = Vector3::from(self.src_positions[0]);
        let scale = -2.0 / (self.c * self.c);
        DMatrix::from_fn(m - 1, n - 1, |a, b| {
            let r = Vector3::from(self.mic_positions[a + 1]) - r0;
            let s = Vector3::from(self.src_positions[b + 1]) - s0;
            scale * r.dot(&s)
        })
    }

    fn validate(&self) -> Result<()> {
        let m = self.num_mics();
        let n = self.num_sources();
        if m < 2 || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "scene needs at least 2 microphones and 2 sources, got {m}x{n}"
            )));
        }
        if self.delta.len() != m || self.eta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "scene has {m} mics / {n} sources but {} start times / {} emission times",
                self.delta.len(),
                self.eta.len()
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "speed of sound must be positive, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementKind {
    #[serde(rename = "TOA")]
    Toa,
    #[serde(rename = "PseudoTOA")]
    PseudoToa,
}

impl MeasurementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasurementKind::Toa => "TOA",
            MeasurementKind::PseudoToa => "PseudoTOA",
        }
    }
}

impl std::str::FromStr for MeasurementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "TOA" | "toa" => Ok(MeasurementKind::Toa),
            "PseudoTOA" | "pseudotoa" | "pseudo-toa" | "tdoa" | "TDOA" => {
                Ok(MeasurementKind::PseudoToa)
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown measurement kind `{other}`"
            ))),
        }
    }
}

/// An `M x N` arrival-time matrix in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    pub values: DMatrix<f64>,
    pub kind: MeasurementKind,
    pub c: f64,
}

impl MeasurementMatrix {
    pub fn new(values: DMatrix<f64>, kind: MeasurementKind, c: f64) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "measurement must be at least 2x2, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "speed of sound must be positive, got {c}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "measurement contains non-finite entries".into(),
            ));
        }
        Ok(Self { values, kind, c })
    }

    pub fn num_mics(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_sources(&self) -> usize {
        self.values.ncols()
    }
}

/// Microphone start times and source emission times with `eta[0] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOffsets {
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl TimingOffsets {
    /// Builds offsets that already satisfy the gauge `eta[0] = 0`.
    pub fn new(delta: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        match eta.first() {
            None => Err(Error::InvalidArgument("eta must not be empty".into())),
            Some(&e0) if e0 != 0.0 => Err(Error::InvalidArgument(format!(
                "eta[0] must be 0 (gauge), got {e0}"
            ))),
            _ => Ok(Self { delta, eta }),
        }
    }

    /// Shifts both vectors by `-eta[0]`, which leaves every TOA unchanged.
    pub fn gauge_fixed(mut delta: Vec<f64>, mut eta: Vec<f64>) -> Result<Self> {
        let shift = *eta
            .first()
            .ok_or_else(|| Error::InvalidArgument("eta must not be empty".into()))?;
        delta.iter_mut().for_each(|d| *d -= shift);
        eta.iter_mut().for_each(|e| *e -= shift);
        eta[0] = 0.0;
        Ok(Self { delta, eta })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            delta: vec![0.0; m],
            eta: vec![0.0; n],
        }
    }

    pub fn num_mics(&self) -> usize {
        self.delta.len()
    }

    pub fn num_sources(&self) -> usize {
        self.eta.len()
    }
}

/// Box and timing ranges for random scene synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub m: usize,
    pub n: usize,
    /// Room extents in meters.
    pub extent: [f64; 3],
    /// Interval the start/emission times are drawn from, in seconds.
    pub time_range: [f64; 2],
    pub c: f64,
}

impl SceneSpec {
    /// 10 m x 10 m x 3 m room, offsets in [-1, 1] s, c = 340 m/s.
    pub fn simulation(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            extent: [10.0, 10.0, 3.0],
            time_range: [-1.0, 1.0],
            c: SPEED_OF_SOUND,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need m >= 2 and n >= 2, got m={} n={}",
                self.m, self.n
            )));
        }
        if self.extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "box extents must be positive, got {:?}",
                self.extent
            )));
        }
        validate_range(self.time_range)?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "speed of sound must be positive, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_range(range: [f64; 2]) -> Result<()> {
    if !(range[0] < range[1]) || !range[0].is_finite() || !range[1].is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time range must be a nonempty finite interval, got [{}, {}]",
            range[0], range[1]
        )));
    }
    Ok(())
}

/// Samples a random scene and re-anchors it so that source 1 sits at the
/// origin, microphone 1 on the positive x axis, and `eta[0] = 0`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_point = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random_range(0.0..spec.extent[0]),
            rng.random_range(0.0..spec.extent[1]),
            rng.random_range(0.0..spec.extent[2]),
        )
    };
    let mics: Vec<Vector3<f64>> = (0..spec.m).map(|_| sample_point(&mut rng)).collect();
    let srcs: Vec<Vector3<f64>> = (0..spec.n).map(|_| sample_point(&mut rng)).collect();
    let [lo, hi] = spec.time_range;
    let delta: Vec<f64> = (0..spec.m).map(|_| rng.random_range(lo..hi)).collect();
    let eta: Vec<f64> = (0..spec.n).map(|_| rng.random_range(lo..hi)).collect();

    let origin = srcs[0];
    let axis = mics[0] - origin;
    let r11 = axis.norm();
    if r11 == 0.0 {
        return Err(Error::DegenerateScene(
            "first microphone coincides with first source".into(),
        ));
    }
    let rotation = align_with_x(&axis);
    let anchor = |p: &Vector3<f64>| -> [f64; 3] {
        let v = rotation * (p - origin);
        [v.x, v.y, v.z]
    };
    let mut mic_positions: Vec<[f64; 3]> = mics.iter().map(anchor).collect();
    let mut src_positions: Vec<[f64; 3]> = srcs.iter().map(anchor).collect();
    // exact anchors, free of rotation round-off
    mic_positions[0] = [r11, 0.0, 0.0];
    src_positions[0] = [0.0, 0.0, 0.0];

    let offsets = TimingOffsets::gauge_fixed(delta, eta)?;
    Ok(Scene {
        mic_positions,
        src_positions,
        delta: offsets.delta,
        eta: offsets.eta,
        c: spec.c,
        seed: Some(seed),
    })
}

fn align_with_x(v: &Vector3<f64>) -> Rotation3<f64> {
    let x = Vector3::x();
    Rotation3::rotation_between(v, &x).unwrap_or_else(|| {
        // antiparallel: half turn about z
        Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), std::f64::consts::PI)
    })
}

/// `t[i,j] = |r_i - s_j| / c + eta_j - delta_i`.
pub fn toa_from_scene(scene: &Scene) -> Result<MeasurementMatrix> {
    scene.validate()?;
    let values = DMatrix::from_fn(scene.num_mics(), scene.num_sources(), |i, j| {
        scene.distance(i, j) / scene.c + scene.eta[j] - scene.delta[i]
    });
    MeasurementMatrix::new(values, MeasurementKind::Toa, scene.c)
}

/// `zeta[i,j] = (|r_i - s_j| - |r_1 - s_j|) / c + delta_1 - delta_i`;
/// the first row is identically zero.
pub fn tdoa_from_scene(scene: &Scene) -> Result<DMatrix<f64>> {
    scene.validate()?;
    Ok(DMatrix::from_fn(
        scene.num_mics(),
        scene.num_sources(),
        |i, j| {
            if i == 0 {
                0.0
            } else {
                (scene.distance(i, j) - scene.distance(0, j)) / scene.c + scene.delta[0]
                    - scene.delta[i]
            }
        },
    ))
}

/// How the pseudo start/emission times of a pseudo-TOA matrix relate to a
/// scene. Pseudo emission times are `-|r_1 - s_j| / c`, pseudo start times
/// are `delta_i - delta_1`, and both are shifted so the first pseudo emission
/// time is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoGauge {
    pub reference_mic: usize,
}

impl PseudoGauge {
    /// Gauged pseudo offsets of `scene`; useful as ground truth in tests and
    /// Monte-Carlo runs on TDOA data.
    pub fn truth(&self, scene: &Scene) -> TimingOffsets {
        let r = self.reference_mic;
        let eta: Vec<f64> = (0..scene.num_sources())
            .map(|j| -scene.distance(r, j) / scene.c)
            .collect();
        let delta: Vec<f64> = scene.delta.iter().map(|d| d - scene.delta[r]).collect();
        TimingOffsets::gauge_fixed(delta, eta).expect("scene has at least one source")
    }
}

/// Reinterprets a TDOA matrix as a pseudo-TOA measurement. The matrix itself
/// is unchanged; only the meaning of the offsets differs.
pub fn pseudo_toa_from_tdoa(
    tdoa: &DMatrix<f64>,
    c: f64,
) -> Result<(MeasurementMatrix, PseudoGauge)> {
    if tdoa.nrows() == 0 {
        return Err(Error::InvalidArgument("empty TDOA matrix".into()));
    }
    if let Some((index, value)) = tdoa
        .row(0)
        .iter()
        .copied()
        .enumerate()
        .find(|(_, v)| !(v.abs() <= TDOA_FIRST_ROW_TOL))
    {
        return Err(Error::MalformedTdoa { index, value });
    }
    let meas = MeasurementMatrix::new(tdoa.clone(), MeasurementKind::PseudoToa, c)?;
    Ok((meas, PseudoGauge { reference_mic: 0 }))
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`
/// seconds to every entry.
pub fn add_noise(meas: &MeasurementMatrix, sigma: f64, seed: u64) -> Result<MeasurementMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise standard deviation must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(meas.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = meas.clone();
    // column-major traversal keeps the draw order stable
    out.values
        .iter_mut()
        .for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(m: usize, n: usize, seed: u64) -> Scene {
        generate_scene(&SceneSpec::simulation(m, n), seed).unwrap()
    }

    #[test]
    fn anchored_scene_layout() {
        let s = scene(10, 10, 42);
        assert_eq!(s.src_positions[0], [0.0, 0.0, 0.0]);
        assert!(s.mic_positions[0][0] > 0.0);
        assert_eq!(&s.mic_positions[0][1..], &[0.0, 0.0]);
        assert_eq!(s.eta[0], 0.0);
        assert_eq!(s.c, 340.0);
        // rigid motion keeps every pair inside the box diagonal
        let diag = (10.0f64 * 10.0 + 10.0 * 10.0 + 3.0 * 3.0).sqrt();
        for i in 0..10 {
            for j in 0..10 {
                assert!(s.distance(i, j) <= diag);
            }
        }
        for d in &s.delta {
            assert!(d.abs() <= 2.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(scene(7, 9, 3), scene(7, 9, 3));
        assert_ne!(scene(7, 9, 3), scene(7, 9, 4));
    }

    #[test]
    fn generation_rejects_bad_arguments() {
        let mut spec = SceneSpec::simulation(1, 5);
        assert!(matches!(
            generate_scene(&spec, 0),
            Err(Error::InvalidArgument(_))
        ));
        spec = SceneSpec::simulation(5, 5);
        spec.time_range = [1.0, 1.0];
        assert!(generate_scene(&spec, 0).is_err());
        spec = SceneSpec::simulation(5, 5);
        spec.extent = [1.0, 0.0, 1.0];
        assert!(generate_scene(&spec, 0).is_err());
    }

    fn two_point_scene(dist: f64) -> Scene {
        Scene {
            mic_positions: vec![[dist, 0.0, 0.0], [1.0, 2.0, 0.5]],
            src_positions: vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]],
            delta: vec![0.0, 0.0],
            eta: vec![0.0, 0.0],
            c: 340.0,
            seed: None,
        }
    }

    #[test]
    fn toa_trivial_values() {
        let toa = toa_from_scene(&two_point_scene(340.0)).unwrap();
        assert_eq!(toa.values[(0, 0)], 1.0);
        assert_eq!(toa.values[(1, 1)], 0.0);
        assert_eq!(toa.kind, MeasurementKind::Toa);
    }

    #[test]
    fn tdoa_is_row_difference_of_toa() {
        let s = scene(8, 11, 5);
        let toa = toa_from_scene(&s).unwrap().values;
        let tdoa = tdoa_from_scene(&s).unwrap();
        for j in 0..11 {
            assert_eq!(tdoa[(0, j)], 0.0);
            for i in 0..8 {
                assert!((toa[(i, j)] - toa[(0, j)] - tdoa[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tdoa_with_equal_offsets_is_pure_geometry() {
        let mut s = scene(6, 6, 9);
        s.delta = vec![0.3; 6];
        let tdoa = tdoa_from_scene(&s).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let geo = (s.distance(i, j) - s.distance(0, j)) / s.c;
                assert!((tdoa[(i, j)] - geo).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pseudo_toa_reconstructs_tdoa() {
        let s = scene(9, 7, 11);
        let tdoa = tdoa_from_scene(&s).unwrap();
        let (meas, gauge) = pseudo_toa_from_tdoa(&tdoa, s.c).unwrap();
        assert_eq!(meas.kind, MeasurementKind::PseudoToa);
        assert_eq!(meas.values, tdoa);
        let truth = gauge.truth(&s);
        assert_eq!(truth.eta[0], 0.0);
        for i in 0..9 {
            for j in 0..7 {
                let rebuilt = s.distance(i, j) / s.c + truth.eta[j] - truth.delta[i];
                assert!((rebuilt - tdoa[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_emission_times_vanish_when_collocated() {
        let mut s = scene(5, 5, 2);
        let r0 = s.mic_positions[0];
        s.src_positions.iter_mut().for_each(|p| *p = r0);
        let gauge = PseudoGauge { reference_mic: 0 };
        // pre-gauge values are -|r1 - sj|/c = 0, so the gauge shift is zero too
        let truth = gauge.truth(&s);
        assert!(truth.eta.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn pseudo_toa_rejects_nonzero_first_row() {
        let mut tdoa = DMatrix::zeros(5, 5);
        tdoa[(0, 3)] = 1e-6;
        match pseudo_toa_from_tdoa(&tdoa, 340.0) {
            Err(Error::MalformedTdoa { index, .. }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
        tdoa[(0, 3)] = 5e-10;
        assert!(pseudo_toa_from_tdoa(&tdoa, 340.0).is_ok());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let meas =
            MeasurementMatrix::new(DMatrix::zeros(100, 100), MeasurementKind::Toa, 340.0).unwrap();
        assert_eq!(add_noise(&meas, 0.0, 1).unwrap(), meas);
        let a = add_noise(&meas, 1e-3, 17).unwrap();
        let b = add_noise(&meas, 1e-3, 17).unwrap();
        assert_eq!(a, b);
        let n = a.values.len() as f64;
        let mean = a.values.sum() / n;
        let var = a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!((sd - 1e-3).abs() < 1e-4, "sample sd {sd}");
        assert!(matches!(
            add_noise(&meas, -1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn toa_is_gauge_invariant() {
        let s = scene(6, 8, 21);
        let base = toa_from_scene(&s).unwrap().values;
        let mut shifted = s.clone();
        shifted.delta.iter_mut().for_each(|d| *d += 0.37);
        shifted.eta.iter_mut().for_each(|e| *e += 0.37);
        let moved = toa_from_scene(&shifted).unwrap().values;
        for (a, b) in base.iter().zip(moved.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
