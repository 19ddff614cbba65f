use proptest::prelude::*;
use spinevox_core::stacks::{
    build_mip_stacks, build_mip_stacks_with, build_raw_stacks, build_raw_stacks_with, linspace_centers, StackSet,
    PLANES, PLANE_SIZE, STACKS,
};
use spinevox_core::volgrid::{Dims, GridKind, Spacing, VoxelGrid, WindowSpec};
use spinevox_core::Exec;

fn volume(z: usize, y: usize, x: usize, seed: u64) -> VoxelGrid {
    VoxelGrid::from_fn(Dims::new(z, y, x), Spacing::UNIT, GridKind::Intensity, |z, y, x| {
        let h = (z as u64 * 73_856_093) ^ (y as u64 * 19_349_663) ^ (x as u64 * 83_492_791) ^ seed;
        (h % 3000) as f64 - 1000.0
    })
    .unwrap()
}

fn check_shape(set: &StackSet) {
    assert_eq!(set.stacks.len(), STACKS);
    for (i, s) in set.stacks.iter().enumerate() {
        assert_eq!(s.index, i);
        assert_eq!(s.planes.len(), PLANES);
        for p in &s.planes {
            assert_eq!(p.len(), PLANE_SIZE * PLANE_SIZE);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stacks_always_have_fixed_shape(z in 1usize..=10_000, y in 1usize..6, x in 1usize..6, seed in any::<u64>()) {
        let v = volume(z, y, x, seed);
        check_shape(&build_raw_stacks(&v, WindowSpec::default()).unwrap());
        check_shape(&build_mip_stacks(&v, WindowSpec::default()).unwrap());
    }

    #[test]
    fn stacks_are_deterministic(z in 1usize..40, y in 1usize..20, x in 1usize..20, seed in any::<u64>()) {
        let v = volume(z, y, x, seed);
        let w = WindowSpec::default();
        let raw = build_raw_stacks_with(&v, w, Some(3), Exec::Parallel).unwrap();
        prop_assert_eq!(&raw, &build_raw_stacks_with(&v, w, Some(3), Exec::Parallel).unwrap());
        prop_assert_eq!(&raw, &build_raw_stacks_with(&v, w, Some(3), Exec::Sequential).unwrap());
        let mip = build_mip_stacks_with(&v, w, None, Exec::Parallel).unwrap();
        prop_assert_eq!(&mip, &build_mip_stacks_with(&v, w, None, Exec::Sequential).unwrap());
    }
}

proptest! {
    #[test]
    fn centers_span_the_volume(z in 1usize..=10_000, n in prop::sample::select(vec![15usize, 75])) {
        let c = linspace_centers(z, n);
        prop_assert_eq!(c.len(), n);
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(c[0], 0);
        prop_assert_eq!(c[n - 1], z - 1);
    }
}
