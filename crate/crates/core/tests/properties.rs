use nalgebra::DMatrix;
use proptest::prelude::*;

use hetmix::datagen::GeneratorSpec;
use hetmix::fab::{fab_v_step, fic_lower_bound, FabConfig};
use hetmix::gaussian::{log_sum_exp, normalize_log_weights, repair_covariance, CovarianceMatrix};
use hetmix::incremental::{
    e_incremental_step, incremental_m_step, update_soft_counts, IncrementalState, UpdateMode,
};
use hetmix::io::Checkpoint;
use hetmix::mixture::{batch_e_step, count_floor, initialize_model, log_likelihood};
use hetmix::trace::{count_iterations_to_convergence, fmt_real, FicTrace, TraceRow};

fn trace_of(values: &[f64]) -> FicTrace {
    let mut t = FicTrace::new();
    for (i, &v) in values.iter().enumerate() {
        t.rows.push(TraceRow {
            iteration: i,
            fic: v,
            loglik: v,
            n_components: 1,
            wall_ms: 0.0,
        });
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reals_round_trip_through_text(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
        let mut w = v.clone();
        normalize_log_weights(&mut w);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factor_products_are_repaired_without_jitter(
        entries in prop::collection::vec(-3.0f64..3.0, 9),
        eps in 1e-3f64..1.0,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let s = &a * a.transpose() + DMatrix::identity(3, 3) * eps;
        let cov = repair_covariance(&s).unwrap();
        prop_assert_eq!(cov.jitter(), 0.0);
        let l = cov.cholesky_factor();
        prop_assert!((l * l.transpose() - &s).amax() <= 1e-10 * s.amax());
        let back = CovarianceMatrix::from_lower_triangle(3, &cov.lower_triangle()).unwrap();
        prop_assert_eq!(back.entries(), cov.entries());
    }

    #[test]
    fn convergence_count_is_within_trace(values in prop::collection::vec(-1e3f64..-1.0, 1..30), tol in 1e-8f64..1e-1) {
        let t = trace_of(&values);
        let p = count_iterations_to_convergence(&t, tol);
        prop_assert!(p.iterations <= values.len());
        if p.converged {
            prop_assert!(p.iterations >= 1);
        } else {
            prop_assert_eq!(p.iterations, values.len());
        }
    }

    #[test]
    fn constant_traces_converge_at_one(v in -1e4f64..-1.0, len in 2usize..20) {
        let p = count_iterations_to_convergence(&trace_of(&vec![v; len]), 1e-6);
        prop_assert_eq!((p.iterations, p.converged), (1, true));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_updates_preserve_normalization(
        seed in any::<u64>(),
        dim in 1usize..4,
        c in 1usize..6,
        exact in any::<bool>(),
        visits in prop::collection::vec(0usize..80, 1..120),
    ) {
        let spec = GeneratorSpec { n: 80, dim, ..GeneratorSpec::table1(seed) };
        let (_, data, _) = spec.generate().unwrap();
        let init = initialize_model(&data, c, seed).unwrap();
        let mode = if exact { UpdateMode::ExactStats } else { UpdateMode::PaperFaithful };
        let mut st = IncrementalState::from_table(&data, batch_e_step(&init, &data).unwrap(), mode, 0).unwrap();
        for &i in &visits {
            let rec = e_incremental_step(&st.model, i, data.row(i), st.table.row(i)).unwrap();
            prop_assert!(rec.delta.iter().sum::<f64>().abs() < 1e-12);
            let (counts, _) = update_soft_counts(&st.model.soft_counts, &rec.delta, count_floor(dim));
            st.model.soft_counts = counts;
            incremental_m_step(&mut st.model, data.row(i), &rec, mode, &mut st.stats, data.n()).unwrap();
            st.table.set_row(i, &rec.new_gamma);
            prop_assert!((st.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((st.model.soft_counts.iter().sum::<f64>() - 80.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fic_bound_never_exceeds_log_likelihood(seed in any::<u64>(), dim in 1usize..4, c in 1usize..6) {
        let spec = GeneratorSpec { n: 120, dim, ..GeneratorSpec::table1(seed) };
        let (_, data, _) = spec.generate().unwrap();
        let model = initialize_model(&data, c, seed).unwrap();
        let cfg = FabConfig::for_dim(dim);
        let q = fab_v_step(&model, &data, &batch_e_step(&model, &data).unwrap(), &cfg).unwrap();
        let fic = fic_lower_bound(&model, &data, &q, &cfg).unwrap();
        prop_assert!(fic <= log_likelihood(&model, &data).unwrap());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), dim in 1usize..5, c in 1usize..5) {
        let spec = GeneratorSpec { n: 60, dim, ..GeneratorSpec::table1(seed) };
        let (_, data, _) = spec.generate().unwrap();
        let model = initialize_model(&data, c, seed).unwrap();
        let ck = Checkpoint::from_model(&model);
        let mut buf = Vec::new();
        ck.write_json(&mut buf).unwrap();
        let back = Checkpoint::read_json(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_model().unwrap(), model);
    }
}
