use cilab_bench::{gaussian, reference_data, reference_linear, relu_mlp};

#[test]
fn fixtures_have_the_expected_shapes() {
    assert_eq!(gaussian(3, 4, 0).shape(), (3, 4));
    assert_eq!(gaussian(3, 4, 0), gaussian(3, 4, 0));
    let (pre, down) = reference_data(200, 15);
    assert_eq!((pre.len(), down.len()), (200, 15));
    let f = reference_linear();
    assert_eq!((f.input_dim(), f.output_dim()), (100, 5));
    let y = f.forward(&down.x).unwrap();
    assert_eq!(y.row(0), down.x.row(0));
    assert_eq!(relu_mlp(8).param_count(), 100 * 8 + 8 + 8 * 5 + 5);
}
