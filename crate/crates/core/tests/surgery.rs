use coverlab::fixtures::{good_fixture, round_trip, Fixture, FixtureOptions};
use coverlab::potential::Constants;
use coverlab::surgery::{
    build_surgery, recover, recover_first_round, DecodeError, LoopKind, PsiFamily, MAX_ENUMERATION_GAP,
};
use coverlab::walk::{RngStream, Trajectory};

fn fixture(n: u32, clusters: Option<usize>, kinds: Option<Vec<LoopKind>>, members: usize, trial: u64) -> Fixture {
    let opts = FixtureOptions { clusters, kinds, max_members: members, ..FixtureOptions::new(n) };
    good_fixture(&opts, &Constants::watson(), 11, trial).unwrap()
}

#[test]
fn no_late_points_means_no_surgery() {
    let fx = fixture(16, Some(0), None, 0, 0);
    assert!(fx.verdict.analysis.late.is_empty());
    let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
    assert_eq!(s.omega_2n, fx.omega);
    assert!(s.plan.stage_one.is_empty() && s.plan.stage_two.is_empty());
    let ext = PsiFamily::new(&s.omega_2n, fx.params.t4).unwrap().sample(&mut RngStream::new(1, "psi", 0)).unwrap();
    let (back, _) = recover(&ext, &fx.f, &fx.params).unwrap();
    assert_eq!(back, ext.restrict(fx.params.t3).unwrap());
}

#[test]
fn single_kind_d_point_adds_two_steps() {
    let fx = fixture(16, Some(1), Some(vec![LoopKind::D]), 0, 0);
    let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
    assert_eq!(s.omega_2n.len(), fx.omega.len() + 2);
    let rec = &s.plan.stage_one[0];
    assert_eq!(rec.r, 0);
    assert_eq!(rec.beta.kind, LoopKind::D);
    // Naive recomputation of the insertion time.
    let h = (fx.params.t2 + 1..=fx.params.t3).find(|&k| fx.omega.at(k) == rec.x).unwrap();
    assert_eq!((rec.hit, rec.at), (h, h));
    // The inserted loop continues in the direction of arrival.
    assert_eq!(s.omega_2n.dir(h), s.omega_2n.dir(h - 1));
    assert_eq!(s.plan.stage_two[0].tree.len(), 0);
}

#[test]
fn two_components_plan() {
    let mut found = false;
    for trial in 0..40 {
        let fx = fixture(24, Some(2), None, 1, trial);
        let sizes: Vec<usize> = fx.verdict.analysis.graph.components().iter().map(|c| c.len()).collect();
        if !(sizes.contains(&1) && sizes.contains(&2)) {
            continue;
        }
        found = true;
        let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
        let p = &s.plan;
        assert_eq!((p.stage_one.len(), p.stage_two.len()), (2, 2));
        assert!(p.stage_one[0].hit < p.stage_one[1].hit);
        assert_eq!(p.stage_one[1].at, p.stage_one[1].hit + p.stage_one[0].beta.len());
        let mut verts: Vec<_> = p.stage_one.iter().flat_map(|r| r.beta.positions.clone()).collect();
        let total = verts.len();
        verts.sort_unstable();
        verts.dedup();
        assert_eq!(verts.len() + p.stage_one.len(), total, "loops share a vertex");
        assert!(s.omega_2n.len() as f64 <= fx.params.t3 as f64 + p.j_budget);
        assert_eq!(&s.omega_2n.positions()[..=fx.params.t2], &fx.omega.positions()[..=fx.params.t2]);
        assert!(((p.s_one + p.s_tree) as u64) <= 6 * p.mdist);
        let tree_len: usize = p.stage_two.iter().map(|t| t.tree.len()).sum();
        assert_eq!(tree_len, p.s_tree);
        assert!(s.omega_2n.covers_torus());
        let rt = round_trip(&fx, &mut RngStream::new(2, "psi", trial)).unwrap();
        assert!(rt.exact(&fx.omega));
        break;
    }
    assert!(found, "no fixture with a singleton and a pair");
}

#[test]
fn every_output_is_a_path() {
    for (n, trial) in [(16, 0), (24, 1), (32, 2)] {
        let fx = fixture(n, None, None, 1, trial);
        let rt = round_trip(&fx, &mut RngStream::new(8, "psi", trial)).unwrap();
        let g = *fx.omega.geometry();
        for tr in [&fx.omega, &rt.surgery.omega_n, &rt.surgery.omega_2n, &rt.sample, &rt.recovered] {
            assert!(Trajectory::from_positions(g, tr.positions().to_vec()).is_ok());
        }
    }
}

#[test]
fn first_round_alone_is_recovered() {
    for trial in 0..4 {
        let fx = fixture(16, None, None, 2, trial);
        let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
        let mut bar = s.omega_n.clone();
        bar.extend_with(fx.params.t4, &mut RngStream::new(3, "bar", trial)).unwrap();
        assert_eq!(recover_first_round(&bar, &fx.f, &fx.params).unwrap(), fx.omega);
    }
}

#[test]
fn tampering_inside_a_loop_is_detected() {
    let mut checked = 0;
    for trial in 0..6 {
        let fx = fixture(16, None, None, 1, trial);
        let rt = round_trip(&fx, &mut RngStream::new(4, "psi", trial)).unwrap();
        let steps = rt.sample.steps();
        for rec in &rt.surgery.plan.stage_one {
            for k in rec.at..rec.at + rec.beta.len() {
                let mut bad = steps.clone();
                bad[k] = (bad[k] + 1) % 6;
                let tampered = Trajectory::from_steps(*rt.sample.geometry(), rt.sample.start(), &bad);
                let out = recover(&tampered, &fx.f, &fx.params);
                assert!(out.is_err(), "tamper at {k} decoded to a path");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn truncated_input_is_rejected() {
    let fx = fixture(16, Some(1), None, 0, 1);
    let short = fx.omega.restrict(fx.params.t3 - 1).unwrap();
    assert!(matches!(recover(&short, &fx.f, &fx.params), Err(DecodeError::TooShort { .. })));
}

#[test]
fn families_of_distinct_paths_are_disjoint() {
    let fxs: Vec<Fixture> = (0..6).map(|t| fixture(16, None, None, 2, 100 + t)).collect();
    let surg: Vec<_> = fxs.iter().map(|fx| build_surgery(&fx.omega, &fx.f, &fx.params).unwrap()).collect();
    for i in 0..fxs.len() {
        for j in i + 1..fxs.len() {
            assert_ne!(fxs[i].omega, fxs[j].omega);
            // Equal-length families are disjoint iff neither prefix extends the other.
            assert!(!surg[i].omega_2n.extends(&surg[j].omega_2n) && !surg[j].omega_2n.extends(&surg[i].omega_2n));
        }
        let fam = PsiFamily::new(&surg[i].omega_2n, fxs[i].params.t4).unwrap();
        for draw in 0..3 {
            let m = fam.sample(&mut RngStream::new(5, "psi", draw)).unwrap();
            assert_eq!(recover(&m, &fxs[i].f, &fxs[i].params).unwrap().0, fxs[i].omega);
        }
    }
}

#[test]
fn counting_bound() {
    for trial in 0..4 {
        let fx = fixture(16, None, None, 2, trial);
        let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
        let fam = PsiFamily::new(&s.omega_2n, fx.params.t4).unwrap();
        let floor = (fx.params.t4 as f64 - fx.params.t3 as f64 - s.plan.j_budget) * 6f64.ln();
        assert!(fam.log_count() >= floor);
        assert_eq!(fam.gap(), fx.params.t4 - s.omega_2n.len());
    }
}

#[test]
fn small_gap_enumeration_all_decode() {
    // Shrink T_4 so the free suffix is enumerable.
    let mut fx = fixture(16, Some(1), Some(vec![LoopKind::B]), 0, 3);
    let s = build_surgery(&fx.omega, &fx.f, &fx.params).unwrap();
    fx.params.t4 = s.omega_2n.len() + 2;
    let fam = PsiFamily::new(&s.omega_2n, fx.params.t4).unwrap();
    assert!(fam.gap() <= MAX_ENUMERATION_GAP);
    let mut count = 0u128;
    for suffix in fam.enumerate().unwrap() {
        let m = fam.member(&suffix).unwrap();
        assert!(m.covers_torus());
        assert_eq!(recover(&m, &fx.f, &fx.params).unwrap().0, fx.omega);
        count += 1;
    }
    assert_eq!(Some(count), fam.count());
    assert_eq!(count, 36);
}

#[test]
fn plan_and_transcript_serialize() {
    let fx = fixture(16, Some(2), None, 1, 5);
    let rt = round_trip(&fx, &mut RngStream::new(6, "psi", 0)).unwrap();
    let plan: serde_json::Value = serde_json::from_str(&rt.surgery.plan.to_json().unwrap()).unwrap();
    assert_eq!(plan["rules_version"], 1);
    let tr: serde_json::Value = serde_json::from_str(&rt.transcript.to_json().unwrap()).unwrap();
    assert_eq!(tr["recovered_len"], fx.params.t3);
    assert_eq!(tr["loops"].as_array().unwrap().len(), 2);
}
