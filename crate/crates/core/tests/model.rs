use gstpp::data::Event;
use gstpp::diffcore::{GradCheck, Group, ParamStore, Tensor};
use gstpp::model::{Gstpp, ModelConfig, Pass};
use gstpp::saag::Ablation;

fn anchors(k: usize) -> Tensor<f64> {
    let data = (0..k).flat_map(|i| {
        let a = i as f64 * std::f64::consts::TAU / k as f64;
        [a.cos(), a.sin()]
    });
    Tensor::matrix(k, 2, data.collect())
}

fn small(ablation: Ablation) -> ModelConfig {
    ModelConfig { k: 4, d_model: 8, d_embed: 6, d_time: 3, layers: 2, beta: 0.2, ablation, h_max: 0.1, ..ModelConfig::default() }
}

fn events() -> Vec<Event> {
    vec![
        Event::new(0.3, 0.1, -0.2),
        Event::new(0.9, 0.8, 0.5),
        Event::new(1.05, -0.6, 0.4),
        Event::new(1.7, 0.0, -1.1),
        Event::new(2.4, 1.2, 0.9),
    ]
}

fn st_nll(model: &Gstpp, store: &ParamStore, evs: &[Event]) -> f64 {
    let mut pass = Pass::<f64>::new(model, store, false);
    let nll = pass.nll(evs).unwrap();
    pass.tape.scalar(nll.st)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, store) = Gstpp::new(&small(Ablation::Full), anchors(4), 3).unwrap();
    let evs = events();
    let mut pass = Pass::<f64>::new(&model, &store, true);
    let nll = pass.nll(&evs).unwrap();
    let grads = store.collect_grads(&pass.p, &pass.tape.backward(nll.st));
    let check = GradCheck { samples_per_param: Some(4), ..GradCheck::default() };
    for group in Group::ALL {
        let probes = check.run(&store, &grads, |ps| st_nll(&model, ps, &evs), |id| store.get(id).group == group);
        assert!(!probes.is_empty(), "{group}");
        let worst = gstpp::diffcore::worst(&probes).unwrap();
        assert!(worst.rel_error < 1e-3, "{group}: {worst:?}");
    }
}

/// With every weight zero the states stay at zero, so the intensity and the
/// mixture are constant and the likelihood has a closed form.
#[test]
fn two_events_with_constant_decoders() {
    let (model, mut store) = Gstpp::new(&small(Ablation::Full), anchors(4), 1).unwrap();
    for p in store.iter_mut() {
        if p.group != Group::AnchorCoords {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let b = 0.3;
    let lv = [0.5f64.ln(), 2.0f64.ln()];
    store.value_mut(model.decoders.intensity.out.b).data[0] = b;
    store.value_mut(model.decoders.log_var.out.b).data.copy_from_slice(&lv);

    let evs = [Event::new(0.7, 0.4, -0.3), Event::new(1.9, -1.2, 0.8)];
    let lam = (1.0 + b.exp()).ln();
    let log_pt = |gap: f64| lam.ln() - lam * gap;
    let c = anchors(4);
    let log_ps = |s: [f64; 2]| {
        let dens: f64 = (0..4)
            .map(|i| {
                let mut p = 0.25;
                for a in 0..2 {
                    let v = lv[a].exp();
                    let r = s[a] - c.at(i, a);
                    p *= (-0.5 * r * r / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .sum();
        dens.ln()
    };
    let expected_t = -(log_pt(0.7) + log_pt(1.2)) / 2.0;
    let expected_s = -(log_ps([0.4, -0.3]) + log_ps([-1.2, 0.8])) / 2.0;

    let mut pass = Pass::<f64>::new(&model, &store, false);
    let nll = pass.nll(&evs).unwrap();
    assert!((pass.tape.scalar(nll.t) - expected_t).abs() < 1e-12);
    assert!((pass.tape.scalar(nll.s) - expected_s).abs() < 1e-12);
    assert!((pass.tape.scalar(nll.st) - expected_t - expected_s).abs() < 1e-12);
}

#[test]
fn later_events_do_not_change_earlier_scores() {
    let (model, store) = Gstpp::new(&small(Ablation::Full), anchors(4), 5).unwrap();
    let evs = events();
    let mut full = Pass::<f64>::new(&model, &store, false);
    let all = full.run(&evs);
    for n in 1..evs.len() {
        let mut pass = Pass::<f64>::new(&model, &store, false);
        let part = pass.run(&evs[..n]);
        for (a, b) in part.iter().zip(&all) {
            assert_eq!(pass.tape.scalar(a.log_pt), full.tape.scalar(b.log_pt));
            assert_eq!(pass.tape.scalar(a.log_ps), full.tape.scalar(b.log_ps));
        }
    }
}

fn local_states(model: &Gstpp, store: &ParamStore) -> Vec<Tensor<f64>> {
    let mut pass = Pass::<f64>::new(model, store, false);
    let recs = pass.run(&events());
    recs.iter().map(|r| pass.tape.value(r.pre.z_l).clone()).collect()
}

/// Perturbs the initial local state of anchor 0 and reports the largest
/// change seen by the other anchors.
fn cross_anchor_effect(ablation: Ablation) -> f64 {
    let (model, mut store) = Gstpp::new(&small(ablation), anchors(4), 7).unwrap();
    let before = local_states(&model, &store);
    let off = store.value_mut(model.dynamics.z_l_offset);
    for v in off.data[..8].iter_mut() {
        *v += 0.5;
    }
    let after = local_states(&model, &store);
    let mut worst: f64 = 0.0;
    for (a, b) in before.iter().zip(&after) {
        for r in 1..4 {
            for (x, y) in a.row_slice(r).iter().zip(b.row_slice(r)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

#[test]
fn without_graph_anchors_evolve_independently() {
    assert_eq!(cross_anchor_effect(Ablation::NoGraph), 0.0);
    assert!(cross_anchor_effect(Ablation::Full) > 1e-8);
}

#[test]
fn f32_pass_tracks_f64() {
    let (model, store) = Gstpp::new(&small(Ablation::Full), anchors(4), 9).unwrap();
    let evs = events();
    let mut p32 = Pass::<f32>::new(&model, &store, false);
    let n32 = p32.nll(&evs).unwrap();
    let a = p32.tape.scalar(n32.st) as f64;
    let b = st_nll(&model, &store, &evs);
    assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
}
