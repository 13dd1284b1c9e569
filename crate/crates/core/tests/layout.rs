use proptest::prelude::*;

use opstego::layout::{
    capacity_bpp, denormalize, desegment, message_rng, normalize_elements, pack, segment, segment_into, unpack,
    BitMessage, LayoutConfig,
};
use opstego::StegoError;

const RANGES: [u32; 4] = [1, 3, 7, 15];

proptest! {
    #[test]
    fn pack_unpack_inverts(seed in any::<u64>(), nr in 0usize..4, groups in 1usize..300) {
        let n_r = RANGES[nr];
        let width = (n_r + 1).trailing_zeros() as usize;
        let bits = BitMessage::random(groups * width, &mut message_rng(seed)).unwrap();
        let e = pack(&bits, n_r).unwrap();
        prop_assert_eq!(e.len(), groups);
        prop_assert!(e.iter().all(|&v| v <= n_r));
        prop_assert_eq!(unpack(&e, n_r).unwrap(), bits);
    }

    #[test]
    fn segmentation_preserves_order(n in 1usize..12, len in 1usize..12, seed in any::<u64>()) {
        let elems: Vec<u32> = (0..n * len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 4) as u32).collect();
        let s = segment_into(&elems, n, 3).unwrap();
        let flat: Vec<u32> = (0..n).flat_map(|j| s.row(j).to_vec()).collect();
        prop_assert_eq!(&flat, &elems);
        prop_assert_eq!(desegment(&s), elems);
    }

    #[test]
    fn denormalize_inverts_normalize(seed in any::<u64>(), nr in 0usize..4) {
        let n_r = RANGES[nr];
        let cfg = LayoutConfig::new(16, n_r, 32, 32);
        let bits = BitMessage::random(cfg.bit_len(), &mut message_rng(seed)).unwrap();
        for grid in cfg.encode(&bits).unwrap() {
            let back = denormalize(&normalize_elements::<f32>(&grid), n_r).unwrap();
            prop_assert_eq!(back, grid);
        }
    }

    #[test]
    fn hard_decisions_stay_in_range(vals in prop::collection::vec(-1e6f64..1e6, 16), nr in 0usize..4) {
        let n_r = RANGES[nr];
        let t = opstego::tensor::Tensor::new(&[4, 4], vals).unwrap();
        let g = denormalize(&t, n_r).unwrap();
        prop_assert!(g.elements().iter().all(|&e| e <= n_r));
    }
}

#[test]
fn capacity_is_segment_bits_over_coarsest_cell() {
    for (l, n_r) in [(16, 1), (32, 3), (8, 15)] {
        let cfg = LayoutConfig::new(l, n_r, 64, 128);
        let want = cfg.bit_len() as f64 / (64.0 * 128.0);
        assert_eq!(capacity_bpp(&cfg).unwrap(), want);
    }
}

#[test]
fn every_scale_holds_the_whole_message() {
    let cfg = LayoutConfig::new(16, 3, 64, 64);
    let bits = BitMessage::random(cfg.bit_len(), &mut message_rng(4)).unwrap();
    let grids = cfg.encode(&bits).unwrap();
    assert_eq!(grids.len(), cfg.scales.len());
    for (g, &s) in grids.iter().zip(&cfg.scales) {
        assert_eq!(g.segments(), (64 / s) * (64 / s));
        assert_eq!(g.segments() * g.seg_len(), cfg.element_count());
        assert_eq!(cfg.decode(g).unwrap(), bits);
    }
    assert_eq!(grids.last().unwrap().seg_len(), 16);
}

#[test]
fn invalid_layouts_are_rejected() {
    assert!(matches!(capacity_bpp(&LayoutConfig::new(16, 2, 64, 64)), Err(StegoError::Config(_))));
    assert!(LayoutConfig::new(16, 1, 62, 64).validate().is_err());
    let cfg = LayoutConfig::new(16, 1, 64, 64);
    assert!(matches!(segment(&[0; 7], &cfg, 4), Err(StegoError::Layout(_))));
    assert!(matches!(pack(&BitMessage::new(vec![1, 0, 1]).unwrap(), 3), Err(StegoError::Layout(_))));
}

#[test]
fn message_files_reject_corruption() {
    let m = BitMessage::new(vec![1, 0, 1, 1, 0, 0, 1, 0, 1]).unwrap();
    let bytes = m.to_file_bytes();
    assert_eq!(&bytes[..4], b"STGM");
    assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 9);
    assert_eq!(&bytes[12..], &[0b1011_0010, 0b1000_0000]);
    assert!(matches!(BitMessage::from_file_bytes(&bytes[..13]), Err(StegoError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(BitMessage::from_file_bytes(&bad), Err(StegoError::Format(_))));
}

#[test]
fn generated_bits_are_balanced() {
    let m = BitMessage::random(200_000, &mut message_rng(99)).unwrap();
    let ones = m.bits().iter().filter(|&&b| b == 1).count() as f64 / m.len() as f64;
    assert!((ones - 0.5).abs() < 0.005, "{ones}");
}
