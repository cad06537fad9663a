use spectral_vit::spectra::PSNR_CAP_DB;
use spectral_vit_web::{cost_table_impl, pattern_sample_impl, PhantomLab};

#[test]
fn reconstruction_improves_and_completes() {
    let lab = PhantomLab::build(16, 40, 1).unwrap();
    for basis in ["pca", "fourier", "laplacian"] {
        let max = lab.max_components_impl(basis).unwrap();
        let coarse = lab.reconstruct_impl(basis, 1).unwrap();
        let full = lab.reconstruct_impl(basis, max).unwrap();
        assert_eq!(full.image().len(), 256);
        assert!(full.psnr_db() > coarse.psnr_db(), "{basis}");
    }
    let full = lab.reconstruct_impl("laplacian", 10_000).unwrap();
    assert_eq!(full.n(), 256);
    assert_eq!(full.psnr_db(), PSNR_CAP_DB);
    assert!(lab.reconstruct_impl("wavelet", 4).is_err());
}

#[test]
fn pattern_samples_follow_requested_class() {
    let strong = 400.0;
    let zero = pattern_sample_impl(strong, 0, 3).unwrap();
    let one = pattern_sample_impl(strong, 1, 3).unwrap();
    assert_eq!(zero.len(), 784);
    // Class 1 carries a checkerboard of amplitude 20 that dominates unit noise.
    assert!(one.iter().map(|v| v.abs()).sum::<f64>() / 784.0 > 15.0);
    assert!(zero.iter().map(|v| v.abs()).sum::<f64>() / 784.0 < 2.0);
    assert_eq!(pattern_sample_impl(1.0, 1, 9).unwrap(), pattern_sample_impl(1.0, 1, 9).unwrap());
}

#[test]
fn cost_table_matches_reference_cell() {
    let rows = cost_table_impl(28, 16, 16, 2, 7).unwrap();
    assert_eq!(rows[0].cost_trans_per_layer, 20480);
    assert_eq!(rows[1].n_tokens, 16);
    let wide = cost_table_impl(112, 16, 16, 2, 7).unwrap();
    assert_eq!(wide[1].n_tokens, 256);
    assert!(wide[1].cost_trans_per_layer > 30 * wide[0].cost_trans_per_layer);
    assert!(cost_table_impl(30, 16, 16, 2, 7).is_err());
}
