use mvlstm::autodiff::CheckDims;
use mvlstm::Variant;
use mvlstm_web::{gradcheck, probe, tied_symmetry};

#[test]
fn probe_renders_a_heatmap_of_the_requested_size() {
    let v = probe(Variant::Lstm, 12, 3, 1, 2, 0, 30, 1e-4).unwrap();
    assert!(v.svg().starts_with("<svg"));
    // one cell per step and per shown dimension
    assert!(v.svg().matches("<rect").count() >= 12 * 30);
    assert!(v.last_delta().is_finite() && v.last_delta() >= 0.0);
    if let Some(t) = v.convergence() {
        assert!((2..=30).contains(&t));
    }
}

#[test]
fn probe_rejects_out_of_range_choices() {
    assert!(probe(Variant::Lstm, 8, 0, 9, 0, 0, 30, 1e-4).is_err());
    assert!(probe(Variant::Lstm, 8, 0, 0, 99, 0, 30, 1e-4).is_err());
    assert!(probe(Variant::Lstm, 8, 0, 0, 0, 500, 30, 1e-4).is_err());
}

#[test]
fn gradcheck_lists_every_parameter_and_passes() {
    let dims = CheckDims {
        input_dim: 3,
        hidden_dim: 4,
        steps: 4,
    };
    let text = gradcheck(Variant::ModevarCrosscell, dims, 1, 1e-5).unwrap();
    assert!(text.contains("W_chat_i") && text.contains("W_xi"), "{text}");
    assert!(text.trim_end().ends_with("pass"), "{text}");
}

#[test]
fn tied_paths_agree_exactly() {
    for v in [Variant::Modevar, Variant::ModevarCrosscell] {
        assert_eq!(tied_symmetry(v, 6, 4, 50).unwrap(), 0.0);
    }
    assert!(tied_symmetry(Variant::Lstm, 6, 4, 50).is_err());
}
