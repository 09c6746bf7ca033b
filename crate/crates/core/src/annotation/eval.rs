use std::collections::HashMap;

use super::*;
use crate::geometry::{Interval, Point, Rect};

/// The part of one array touched by one superblock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRegion {
    pub argument: String,
    pub mode: AccessMode,
    pub region: Rect,
}

/// Range of values each bound variable takes over a superblock.
fn variable_ranges(
    annotation: &AccessAnnotation,
    superblock: &Rect,
    block_size: &Point,
) -> Result<HashMap<String, Interval>, EvalError> {
    let rank = superblock.rank();
    let mut ranges = HashMap::new();

    for binding in &annotation.bindings {
        for (axis, name) in binding.variables.iter().enumerate() {
            if axis >= rank {
                return Err(EvalError::AxisOutOfRange {
                    name: name.clone(),
                    axis,
                    rank,
                });
            }
            let (lo, hi) = (superblock.lo()[axis], superblock.hi()[axis] - 1);
            let bs = block_size[axis];
            let iv = match binding.space {
                BindingSpace::Global => Interval::new(lo, hi),
                BindingSpace::Block => Interval::new(lo.div_euclid(bs), hi.div_euclid(bs)),
                BindingSpace::Local => {
                    if lo.div_euclid(bs) == hi.div_euclid(bs) {
                        Interval::new(lo.rem_euclid(bs), hi.rem_euclid(bs))
                    } else {
                        Interval::new(0, bs - 1)
                    }
                }
            };
            ranges.insert(name.clone(), iv);
        }
    }
    Ok(ranges)
}

fn eval_interval(expr: &LinearExpr, ranges: &HashMap<String, Interval>) -> Interval {
    expr.terms
        .iter()
        .fold(Interval::point(expr.constant), |acc, (name, coefficient)| {
            // unbound names are rejected by the parser
            acc.add(ranges[name].scale(*coefficient))
        })
}

/// Evaluates the access region of every annotated argument for one superblock.
///
/// `superblock` is given in global thread coordinates. Each result is clipped
/// to the argument's array domain.
pub fn evaluate_region(
    annotation: &AccessAnnotation,
    superblock: &Rect,
    block_size: &Point,
    array_domains: &HashMap<String, Rect>,
) -> Result<Vec<AccessRegion>, EvalError> {
    if superblock.is_empty() {
        return Err(EvalError::EmptySuperblock(*superblock));
    }
    if block_size.rank() != superblock.rank() {
        return Err(GeometryError::RankMismatch(block_size.rank(), superblock.rank()).into());
    }
    let ranges = variable_ranges(annotation, superblock, block_size)?;

    annotation
        .accesses
        .iter()
        .map(|access| {
            let domain = array_domains
                .get(&access.argument)
                .ok_or_else(|| EvalError::MissingArgument(access.argument.clone()))?;
            if access.indices.len() != domain.rank() {
                return Err(EvalError::RankMismatch {
                    argument: access.argument.clone(),
                    indices: access.indices.len(),
                    rank: domain.rank(),
                });
            }

            let bounds: Vec<(i64, i64)> = access
                .indices
                .iter()
                .enumerate()
                .map(|(axis, spec)| {
                    let iv = match spec {
                        IndexSpec::Single(e) => eval_interval(e, &ranges),
                        IndexSpec::Slice { lower, upper } => {
                            let lo = lower
                                .as_ref()
                                .map(|e| eval_interval(e, &ranges))
                                .unwrap_or(Interval::point(domain.lo()[axis]));
                            let hi = upper
                                .as_ref()
                                .map(|e| eval_interval(e, &ranges))
                                .unwrap_or(Interval::point(domain.hi()[axis] - 1));
                            if lo.is_empty() || hi.is_empty() {
                                Interval::EMPTY
                            } else {
                                Interval::new(lo.lo, hi.hi)
                            }
                        }
                    };
                    iv.to_half_open()
                })
                .collect();

            let region = Rect::from_bounds(&bounds)?.clip(domain)?;
            Ok(AccessRegion {
                argument: access.argument.clone(),
                mode: access.mode,
                region,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteConflict {
    pub first: usize,
    pub second: usize,
    pub argument: String,
    pub overlap: Rect,
}

/// Rejects launches in which two superblocks write overlapping elements of the
/// same argument. Reductions are exempt.
pub fn check_write_disjointness(regions: &[Vec<AccessRegion>]) -> Result<(), WriteConflict> {
    for (a, first) in regions.iter().enumerate() {
        for (b, second) in regions.iter().enumerate().skip(a + 1) {
            for ra in first.iter().filter(|r| r.mode.writes()) {
                for rb in second
                    .iter()
                    .filter(|r| r.mode.writes() && r.argument == ra.argument)
                {
                    let overlap = match ra.region.intersect(&rb.region) {
                        Ok(o) => o,
                        Err(_) => continue,
                    };
                    if !overlap.is_empty() {
                        return Err(WriteConflict {
                            first: a,
                            second: b,
                            argument: ra.argument.clone(),
                            overlap,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::parse_annotation;
    use proptest::prelude::*;

    fn rect(bounds: &[(i64, i64)]) -> Rect {
        Rect::from_bounds(bounds).unwrap()
    }

    fn domains(entries: &[(&str, Rect)]) -> HashMap<String, Rect> {
        entries.iter().map(|(n, r)| (n.to_string(), *r)).collect()
    }

    /// Per-thread enumeration: bounding box of every element any thread of
    /// the superblock touches, then clipped to the domain.
    fn brute_force(
        annotation: &AccessAnnotation,
        superblock: &Rect,
        block_size: &Point,
        domains: &HashMap<String, Rect>,
    ) -> Vec<Rect> {
        annotation
            .accesses
            .iter()
            .map(|access| {
                let domain = domains[&access.argument];
                let mut hull: Option<Rect> = None;
                for t in superblock.points() {
                    let value_of = |name: &str| {
                        let (space, axis) = annotation.lookup_variable(name).unwrap();
                        match space {
                            BindingSpace::Global => t[axis],
                            BindingSpace::Block => t[axis].div_euclid(block_size[axis]),
                            BindingSpace::Local => t[axis].rem_euclid(block_size[axis]),
                        }
                    };
                    let mut bounds = vec![];
                    for (axis, spec) in access.indices.iter().enumerate() {
                        let (lo, hi) = match spec {
                            IndexSpec::Single(e) => {
                                let v = e.eval_at(value_of);
                                (v, v)
                            }
                            IndexSpec::Slice { lower, upper } => (
                                lower.as_ref().map_or(domain.lo()[axis], |e| e.eval_at(value_of)),
                                upper.as_ref().map_or(domain.hi()[axis] - 1, |e| e.eval_at(value_of)),
                            ),
                        };
                        bounds.push((lo, hi + 1));
                    }
                    if bounds.iter().any(|(lo, hi)| lo >= hi) {
                        continue;
                    }
                    let cell = Rect::from_bounds(&bounds).unwrap();
                    hull = Some(match hull {
                        None => cell,
                        Some(h) => h.hull(&cell).unwrap(),
                    });
                }
                match hull {
                    Some(h) => h.clip(&domain).unwrap(),
                    None => Rect::new(domain.lo(), domain.lo()).unwrap(),
                }
            })
            .collect()
    }

    fn regions_of(res: &[AccessRegion]) -> Vec<Rect> {
        res.iter().map(|r| r.region).collect()
    }

    fn same_cells(a: &Rect, b: &Rect) -> bool {
        a == b || (a.is_empty() && b.is_empty())
    }

    #[test]
    fn stencil_interior_superblock() {
        let ann = parse_annotation("global i => read A[i-1:i+1], write B[i]").unwrap();
        let d = domains(&[("A", rect(&[(0, 1_000_000)])), ("B", rect(&[(0, 1_000_000)]))]);
        let sb = rect(&[(64_000, 128_000)]);
        let bs = Point::new(&[16]).unwrap();
        let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
        assert_eq!(got[0].region, rect(&[(63_999, 128_001)]));
        assert_eq!(got[0].mode, AccessMode::Read);
        assert_eq!(got[1].region, rect(&[(64_000, 128_000)]));
        assert_eq!(regions_of(&got), brute_force(&ann, &sb, &bs, &d));

        let first = rect(&[(0, 64_000)]);
        let got = evaluate_region(&ann, &first, &bs, &d).unwrap();
        assert_eq!(got[0].region, rect(&[(0, 64_001)]));
        assert_eq!(regions_of(&got), brute_force(&ann, &first, &bs, &d));
    }

    #[test]
    fn matmul_superblock() {
        let ann = parse_annotation("global [i, j] => read A[i,:], read B[:,j], write C[i,j]").unwrap();
        let m = rect(&[(0, 8), (0, 8)]);
        let d = domains(&[("A", m), ("B", m), ("C", m)]);
        let sb = rect(&[(0, 4), (0, 4)]);
        let bs = Point::new(&[2, 2]).unwrap();
        let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
        let expected = vec![rect(&[(0, 4), (0, 8)]), rect(&[(0, 8), (0, 4)]), rect(&[(0, 4), (0, 4)])];
        assert_eq!(regions_of(&got), expected);
        assert_eq!(brute_force(&ann, &sb, &bs, &d), expected);
    }

    #[test]
    fn column_reduction() {
        let ann = parse_annotation("global [i, j] => read A[i,j], reduce(+) sum[i]").unwrap();
        let d = domains(&[("A", rect(&[(0, 8), (0, 8)])), ("sum", rect(&[(0, 8)]))]);
        let sb = rect(&[(0, 8), (0, 8)]);
        let bs = Point::new(&[4, 4]).unwrap();
        let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
        assert_eq!(got[1].region, rect(&[(0, 8)]));
        assert_eq!(got[1].mode, AccessMode::Reduce(ReduceOp::Plus));
        assert_eq!(regions_of(&got), brute_force(&ann, &sb, &bs, &d));
    }

    #[test]
    fn inverted_slice_is_empty() {
        let ann = parse_annotation("global i => read A[i+5:i]").unwrap();
        let d = domains(&[("A", rect(&[(0, 100)]))]);
        let got = evaluate_region(&ann, &rect(&[(0, 3)]), &Point::new(&[1]).unwrap(), &d).unwrap();
        assert!(got[0].region.is_empty());
    }

    #[test]
    fn rank_mismatch_and_missing() {
        let ann = parse_annotation("global i => read A[i, i]").unwrap();
        let bs = Point::new(&[4]).unwrap();
        let d = domains(&[("A", rect(&[(0, 10)]))]);
        assert!(matches!(
            evaluate_region(&ann, &rect(&[(0, 4)]), &bs, &d),
            Err(EvalError::RankMismatch { indices: 2, rank: 1, .. })
        ));
        assert!(matches!(
            evaluate_region(&ann, &rect(&[(0, 4)]), &bs, &HashMap::new()),
            Err(EvalError::MissingArgument(_))
        ));
        let ann = parse_annotation("global [i, j] => read A[j]").unwrap();
        assert!(matches!(
            evaluate_region(&ann, &rect(&[(0, 4)]), &bs, &d),
            Err(EvalError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn block_and_local_bindings() {
        let ann = parse_annotation("block b, local l => read A[4*b + l], write B[b]").unwrap();
        let d = domains(&[("A", rect(&[(0, 64)])), ("B", rect(&[(0, 16)]))]);
        let bs = Point::new(&[4]).unwrap();
        for sb in [rect(&[(8, 24)]), rect(&[(9, 11)]), rect(&[(0, 64)])] {
            let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
            assert_eq!(regions_of(&got), brute_force(&ann, &sb, &bs, &d), "{sb:?}");
        }
    }

    #[test]
    fn write_disjointness() {
        let ann = parse_annotation("global i => read A[i-1:i+1], write B[i]").unwrap();
        let d = domains(&[("A", rect(&[(0, 256)])), ("B", rect(&[(0, 256)]))]);
        let bs = Point::new(&[16]).unwrap();
        let regions: Vec<_> = (0..4)
            .map(|k| evaluate_region(&ann, &rect(&[(64 * k, 64 * (k + 1))]), &bs, &d).unwrap())
            .collect();
        assert_eq!(check_write_disjointness(&regions), Ok(()));

        let both = |lo, hi| {
            vec![AccessRegion {
                argument: "B".into(),
                mode: AccessMode::Write,
                region: rect(&[(lo, hi)]),
            }]
        };
        let err = check_write_disjointness(&[both(0, 10), both(0, 10)]).unwrap_err();
        assert_eq!((err.first, err.second), (0, 1));
        assert_eq!(err.overlap, rect(&[(0, 10)]));

        let reduce = |lo, hi| {
            vec![AccessRegion {
                argument: "sum".into(),
                mode: AccessMode::Reduce(ReduceOp::Plus),
                region: rect(&[(lo, hi)]),
            }]
        };
        assert_eq!(check_write_disjointness(&[reduce(0, 8), reduce(0, 8)]), Ok(()));
    }

    fn arb_expr(vars: &'static [&'static str]) -> impl Strategy<Value = LinearExpr> {
        (-5i64..5, prop::collection::vec((prop::sample::select(vars), -3i64..=3), 0..3)).prop_map(
            |(c, terms)| {
                terms
                    .into_iter()
                    .fold(LinearExpr::constant(c), |e, (v, k)| e.plus(&LinearExpr::term(v, k), 1))
            },
        )
    }

    fn arb_index(vars: &'static [&'static str]) -> impl Strategy<Value = IndexSpec> {
        prop_oneof![
            arb_expr(vars).prop_map(IndexSpec::Single),
            (arb_expr(vars), 0i64..4).prop_map(|(e, w)| {
                let upper = e.clone().plus(&LinearExpr::constant(w), 1);
                IndexSpec::slice(e, upper)
            }),
            arb_expr(vars).prop_map(|e| IndexSpec::Slice { lower: Some(e), upper: None }),
            arb_expr(vars).prop_map(|e| IndexSpec::Slice { lower: None, upper: Some(e) }),
            Just(IndexSpec::full()),
        ]
    }

    // one-sided slices are left out: in 2-D a thread whose slice is inverted on
    // one axis contributes nothing on the other, which interval bounds ignore
    fn arb_dense_index(vars: &'static [&'static str]) -> impl Strategy<Value = IndexSpec> {
        prop_oneof![
            arb_expr(vars).prop_map(IndexSpec::Single),
            (arb_expr(vars), 0i64..4).prop_map(|(e, w)| {
                let upper = e.clone().plus(&LinearExpr::constant(w), 1);
                IndexSpec::slice(e, upper)
            }),
            Just(IndexSpec::full()),
        ]
    }

    proptest! {
        #[test]
        fn matches_brute_force_1d(
            index in arb_index(&["i"]),
            lo in 0i64..40,
            ext in 1i64..30,
            dom in (-5i64..5, 1i64..60),
        ) {
            let ann = AccessAnnotation {
                bindings: vec![Binding { space: BindingSpace::Global, variables: vec!["i".into()] }],
                accesses: vec![Access { argument: "X".into(), mode: AccessMode::Read, indices: vec![index] }],
            };
            let sb = rect(&[(lo, lo + ext)]);
            let d = domains(&[("X", rect(&[(dom.0, dom.0 + dom.1)]))]);
            let bs = Point::new(&[4]).unwrap();
            let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
            let expected = brute_force(&ann, &sb, &bs, &d);
            prop_assert!(same_cells(&got[0].region, &expected[0]), "{:?} vs {:?}", got[0].region, expected[0]);
        }

        #[test]
        fn matches_brute_force_2d(
            indices in prop::collection::vec(arb_dense_index(&["i", "j"]), 2),
            lo in (0i64..20, 0i64..20),
            ext in (1i64..12, 1i64..12),
            dom in (-5i64..5, 1i64..40),
        ) {
            let ann = AccessAnnotation {
                bindings: vec![Binding { space: BindingSpace::Global, variables: vec!["i".into(), "j".into()] }],
                accesses: vec![Access { argument: "X".into(), mode: AccessMode::Read, indices }],
            };
            let sb = rect(&[(lo.0, lo.0 + ext.0), (lo.1, lo.1 + ext.1)]);
            let d = domains(&[("X", rect(&[(dom.0, dom.0 + dom.1), (0, dom.1)]))]);
            let bs = Point::new(&[4, 4]).unwrap();
            let got = evaluate_region(&ann, &sb, &bs, &d).unwrap();
            let expected = brute_force(&ann, &sb, &bs, &d);
            prop_assert!(same_cells(&got[0].region, &expected[0]), "{:?} vs {:?}", got[0].region, expected[0]);
        }

        #[test]
        fn monotone_in_superblock(
            indices in prop::collection::vec(arb_index(&["i"]), 1),
            outer in (0i64..50, 1i64..50),
            inner in (0i64..50, 0i64..50),
        ) {
            let ann = AccessAnnotation {
                bindings: vec![Binding { space: BindingSpace::Global, variables: vec!["i".into()] }],
                accesses: vec![Access { argument: "X".into(), mode: AccessMode::Read, indices }],
            };
            let big = rect(&[(outer.0, outer.0 + outer.1)]);
            let lo = outer.0 + inner.0 % outer.1;
            let hi = (lo + 1 + inner.1).min(outer.0 + outer.1);
            let small = rect(&[(lo, hi)]);
            let d = domains(&[("X", rect(&[(0, 80)]))]);
            let bs = Point::new(&[8]).unwrap();
            let r_big = evaluate_region(&ann, &big, &bs, &d).unwrap();
            let r_small = evaluate_region(&ann, &small, &bs, &d).unwrap();
            prop_assert!(r_big[0].region.contains(&r_small[0].region).unwrap());
        }
    }
}
