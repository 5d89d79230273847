//! Cross-domain transfer of fitted mappers.
//!
//! A ridge mapper trained on one domain's activations is scored on held-out
//! items from the same domain and from the other domain. If the alignment
//! is domain-specific, in-domain R² stays well above transfer R² in both
//! directions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{fit_ridge, r2_score, ActivationSet};
use crate::error::{Error, Result};
use crate::intervention::depth_key;
use crate::numerics::SeededRng;

/// Teacher and student activations for the same items, same row order.
#[derive(Debug, Clone)]
pub struct PairedActivations {
    pub teacher: ActivationSet,
    pub student: ActivationSet,
}

impl PairedActivations {
    pub fn new(teacher: ActivationSet, student: ActivationSet) -> Result<Self> {
        if teacher.item_ids != student.item_ids {
            return Err(Error::ItemMismatch(
                "teacher and student activations cover different items".into(),
            ));
        }
        let norm = |a: ActivationSet| if a.normalized { Ok(a) } else { a.normalized() };
        Ok(Self {
            teacher: norm(teacher)?,
            student: norm(student)?,
        })
    }

    fn subset(&self, ids: &[String]) -> Result<Self> {
        Ok(Self {
            teacher: self.teacher.select(ids)?,
            student: self.student.select(ids)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissociationProtocol {
    pub n_train: usize,
    pub n_test: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for DissociationProtocol {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            lambda: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissociationResult {
    pub teacher_id: String,
    pub student_id: String,
    pub l_t: f64,
    pub l_s: f64,
    pub verbal_in_r2: f64,
    pub verbal_to_math_r2: f64,
    pub math_in_r2: f64,
    pub math_to_verbal_r2: f64,
    pub confirmed: bool,
}

impl DissociationResult {
    /// Smallest in-domain minus transfer gap over the two directions.
    pub fn margin(&self) -> f64 {
        (self.verbal_in_r2 - self.verbal_to_math_r2).min(self.math_in_r2 - self.math_to_verbal_r2)
    }
}

/// Disjoint train and test id lists drawn by a seeded shuffle.
fn draw(
    pair: &PairedActivations,
    protocol: &DissociationProtocol,
    stream: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let needed = protocol.n_train + protocol.n_test;
    if pair.teacher.len() < needed {
        return Err(Error::InsufficientData(format!(
            "need {needed} items for a {}/{} split, got {}",
            protocol.n_train,
            protocol.n_test,
            pair.teacher.len()
        )));
    }
    let order = SeededRng::with_stream(protocol.seed, stream).permutation(pair.teacher.len());
    let ids = |range: &[usize]| {
        range
            .iter()
            .map(|&i| pair.teacher.item_ids[i].clone())
            .collect()
    };
    Ok((
        ids(&order[..protocol.n_train]),
        ids(&order[protocol.n_train..needed]),
    ))
}

/// Train on `a`, score on held-out `a` and on held-out `b`.
fn one_direction(
    a_train: &PairedActivations,
    a_test: &PairedActivations,
    b_test: &PairedActivations,
    lambda: f64,
) -> Result<(f64, f64)> {
    let mapper = fit_ridge(&a_train.teacher, &a_train.student, lambda)?;
    let in_domain = r2_score(&mapper, &a_test.teacher, &a_test.student)?.r2;
    let transfer = r2_score(&mapper, &b_test.teacher, &b_test.student)?.r2;
    Ok((in_domain, transfer))
}

/// Both transfer directions at one depth pair.
pub fn run_dissociation(
    verbal: &PairedActivations,
    math: &PairedActivations,
    l_t: f64,
    l_s: f64,
    protocol: &DissociationProtocol,
) -> Result<DissociationResult> {
    let (v_train, v_test) = draw(verbal, protocol, 1)?;
    let (m_train, m_test) = draw(math, protocol, 2)?;
    let (v_train, v_test) = (verbal.subset(&v_train)?, verbal.subset(&v_test)?);
    let (m_train, m_test) = (math.subset(&m_train)?, math.subset(&m_test)?);
    let (verbal_in, verbal_to_math) = one_direction(&v_train, &v_test, &m_test, protocol.lambda)?;
    let (math_in, math_to_verbal) = one_direction(&m_train, &m_test, &v_test, protocol.lambda)?;
    Ok(DissociationResult {
        teacher_id: verbal.teacher.model_id.clone(),
        student_id: verbal.student.model_id.clone(),
        l_t,
        l_s,
        verbal_in_r2: verbal_in,
        verbal_to_math_r2: verbal_to_math,
        math_in_r2: math_in,
        math_to_verbal_r2: math_to_verbal,
        confirmed: verbal_in > verbal_to_math && math_in > math_to_verbal,
    })
}

/// Depth-keyed activations of one model on one domain (keys from
/// [`depth_key`]).
pub type DepthActivations = BTreeMap<String, ActivationSet>;

/// [`run_dissociation`] at every `(l_T, l_S)` in `depth_grid × depth_grid`,
/// row-major in `l_T`.
pub fn run_layer_dissociation(
    teacher_verbal: &DepthActivations,
    teacher_math: &DepthActivations,
    student_verbal: &DepthActivations,
    student_math: &DepthActivations,
    depth_grid: &[f64],
    protocol: &DissociationProtocol,
) -> Result<Vec<DissociationResult>> {
    let get = |map: &DepthActivations, l: f64, what: &str| {
        map.get(&depth_key(l))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no {what} activations at depth {l}")))
    };
    let mut out = Vec::with_capacity(depth_grid.len() * depth_grid.len());
    for &l_t in depth_grid {
        for &l_s in depth_grid {
            let verbal = PairedActivations::new(
                get(teacher_verbal, l_t, "teacher verbal")?,
                get(student_verbal, l_s, "student verbal")?,
            )?;
            let math = PairedActivations::new(
                get(teacher_math, l_t, "teacher math")?,
                get(student_math, l_s, "student math")?,
            )?;
            out.push(run_dissociation(&verbal, &math, l_t, l_s, protocol)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    teacher: &'a str,
    student: &'a str,
    tqa_in: f64,
    tqa_to_gsm: f64,
    gsm_in: f64,
    gsm_to_tqa: f64,
    confirmed: bool,
}

#[derive(Serialize)]
struct GridRow<'a> {
    teacher: &'a str,
    student: &'a str,
    l_t: f64,
    l_s: f64,
    tqa_in: f64,
    tqa_to_gsm: f64,
    gsm_in: f64,
    gsm_to_tqa: f64,
    confirmed: bool,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Columns: teacher, student, tqa_in, tqa_to_gsm, gsm_in, gsm_to_tqa,
/// confirmed (verbal plays the `tqa` role, math the `gsm` role).
pub fn write_summary_csv(path: &Path, results: &[DissociationResult]) -> Result<()> {
    let bytes = csv_bytes(results.iter().map(|r| SummaryRow {
        teacher: &r.teacher_id,
        student: &r.student_id,
        tqa_in: r.verbal_in_r2,
        tqa_to_gsm: r.verbal_to_math_r2,
        gsm_in: r.math_in_r2,
        gsm_to_tqa: r.math_to_verbal_r2,
        confirmed: r.confirmed,
    }))?;
    crate::io_util::write_atomic(path, &bytes)
}

/// As [`write_summary_csv`] with `l_t`, `l_s` after the model ids.
pub fn write_grid_csv(path: &Path, results: &[DissociationResult]) -> Result<()> {
    let bytes = csv_bytes(results.iter().map(|r| GridRow {
        teacher: &r.teacher_id,
        student: &r.student_id,
        l_t: r.l_t,
        l_s: r.l_s,
        tqa_in: r.verbal_in_r2,
        tqa_to_gsm: r.verbal_to_math_r2,
        gsm_in: r.math_in_r2,
        gsm_to_tqa: r.math_to_verbal_r2,
        confirmed: r.confirmed,
    }))?;
    crate::io_util::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpora::Domain;
    use crate::numerics::DenseMatrix;

    /// Two synthetic domains whose teacher->student maps differ.
    fn synthetic(
        domain: Domain,
        prefix: &str,
        n: usize,
        seed: u64,
        map_sign: f64,
    ) -> PairedActivations {
        let mut rng = SeededRng::new(seed);
        let (dt, ds) = (6, 4);
        let mut t = Vec::new();
        let mut s = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..dt).map(|_| rng.normal()).collect();
            for j in 0..ds {
                s.push(map_sign * (x[j] + 0.5 * x[j + 2]) + 0.05 * rng.normal());
            }
            t.extend(x);
        }
        let ids: Vec<String> = (0..n).map(|i| format!("{prefix}-{i}")).collect();
        let mk = |model: &str, d, data| ActivationSet {
            model_id: model.into(),
            layer_index: 1,
            relative_depth: 0.75,
            domain: Some(domain),
            item_ids: ids.clone(),
            matrix: DenseMatrix::new(n, d, data).unwrap(),
            normalized: false,
        };
        PairedActivations::new(mk("teacher", dt, t), mk("student", ds, s)).unwrap()
    }

    #[test]
    fn opposite_maps_dissociate() {
        let v = synthetic(Domain::Verbal, "v", 320, 1, 1.0);
        let m = synthetic(Domain::Math, "m", 320, 2, -1.0);
        let r = run_dissociation(&v, &m, 0.75, 0.75, &DissociationProtocol::default()).unwrap();
        assert!(r.confirmed);
        assert!(r.margin() > 0.3, "{r:?}");
        assert!(r.verbal_in_r2 > 0.9 && r.math_in_r2 > 0.9);
    }

    #[test]
    fn self_transfer_matches_in_domain() {
        let v = synthetic(Domain::Verbal, "v", 320, 3, 1.0);
        let r = run_dissociation(
            &v,
            &v,
            0.75,
            0.75,
            &DissociationProtocol {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        // Both domains draw from the same pool, so the held-out sets share
        // a distribution and the gap is small.
        assert!((r.verbal_in_r2 - r.verbal_to_math_r2).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn insufficient_items_is_an_error() {
        let v = synthetic(Domain::Verbal, "v", 250, 4, 1.0);
        let m = synthetic(Domain::Math, "m", 320, 5, -1.0);
        assert!(matches!(
            run_dissociation(&v, &m, 0.75, 0.75, &DissociationProtocol::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let v = synthetic(Domain::Verbal, "v", 310, 6, 1.0);
        let p = DissociationProtocol::default();
        let (train, test) = draw(&v, &p, 1).unwrap();
        assert_eq!((train.len(), test.len()), (200, 100));
        assert!(train.iter().all(|id| !test.contains(id)));
        assert_eq!(draw(&v, &p, 1).unwrap(), (train, test));
    }

    #[test]
    fn layer_grid_has_one_result_per_cell() {
        let grid = [0.25, 0.5, 0.75, 0.9];
        let v = synthetic(Domain::Verbal, "v", 300, 7, 1.0);
        let m = synthetic(Domain::Math, "m", 300, 8, -1.0);
        let by_depth = |a: &ActivationSet| -> DepthActivations {
            grid.iter().map(|&l| (depth_key(l), a.clone())).collect()
        };
        let out = run_layer_dissociation(
            &by_depth(&v.teacher),
            &by_depth(&m.teacher),
            &by_depth(&v.student),
            &by_depth(&m.student),
            &grid,
            &DissociationProtocol::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 16);
        assert_eq!((out[1].l_t, out[1].l_s), (0.25, 0.5));
        assert!(out.iter().all(|r| r.confirmed));
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let v = synthetic(Domain::Verbal, "v", 300, 7, 1.0);
        let m = synthetic(Domain::Math, "m", 300, 8, -1.0);
        let r = run_dissociation(&v, &m, 0.75, 0.75, &DissociationProtocol::default()).unwrap();
        let path = dir.path().join("d.csv");
        write_summary_csv(&path, &[r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("teacher,student,tqa_in,tqa_to_gsm,gsm_in,gsm_to_tqa,confirmed\n"));
    }
}
