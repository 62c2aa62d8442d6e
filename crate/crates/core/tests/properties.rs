//! Randomized invariants for the order-sensitive pieces: serialization,
//! the scan kernel, padding layout, and the evaluation metrics.

use proptest::prelude::*;

use mos_core::network_blocks::ra_layout;
use mos_core::serialization::{deserialize, serialize_coords, SerializationPattern};
use mos_core::ssm_kernel::{discretize_sequence, scan_blocked, scan_sequential, zoh_discretize};
use mos_core::train_eval::{lovasz_softmax, ConfusionCounts};
use mos_core::{DenseArray, Tape};

fn pattern_strategy() -> impl Strategy<Value = SerializationPattern> {
    prop::sample::select(SerializationPattern::ALL.to_vec())
}

proptest! {
    /// Any cloud whose per-axis extent fits the key width serializes to a
    /// permutation, and walking the permutation back is the identity.
    #[test]
    fn serialization_round_trips(
        offsets in prop::collection::vec((0i64..512, 0i64..512, 0i64..512), 1..60),
        base in prop::collection::vec(-1_000_000i64..1_000_000, 3..=3),
        ids in prop::collection::vec(0u32..4, 60),
        pattern in pattern_strategy(),
        bits in 10u32..=16,
    ) {
        let coords: Vec<[i64; 3]> = offsets
            .iter()
            .map(|&(x, y, z)| [base[0] + x, base[1] + y, base[2] + z])
            .collect();
        let ids = &ids[..coords.len()];
        let seq = serialize_coords(&coords, ids, pattern, bits).unwrap();

        let mut seen = vec![false; coords.len()];
        for &i in &seq.order {
            prop_assert!(!seen[i], "row {i} appears twice in the order");
            seen[i] = true;
        }
        for (j, &i) in seq.order.iter().enumerate() {
            prop_assert_eq!(seq.inverse[i], j);
        }
        let values: Vec<usize> = (0..coords.len()).collect();
        let shuffled: Vec<usize> = seq.order.iter().map(|&i| values[i]).collect();
        prop_assert_eq!(deserialize(&shuffled, &seq).unwrap(), values);
    }

    /// Discretization of a decaying mode stays a contraction: `abar` is
    /// `exp(a * delta)` and `bbar` has the sign of `b`, whichever side of
    /// the small-delta guard the step lands on.
    #[test]
    fn zoh_keeps_decay_contractive(
        a in -5.0f64..-0.01,
        b in prop::num::f64::NORMAL.prop_filter("moderate", |v| v.abs() > 1e-3 && v.abs() < 1e3),
        delta in 1e-9f64..1.0,
    ) {
        let (abar, bbar) = zoh_discretize(a, b, delta).unwrap();
        prop_assert!(abar > 0.0 && abar < 1.0, "abar {abar} outside (0, 1)");
        let exact = (a * delta).exp();
        prop_assert!((abar - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        prop_assert!(bbar.is_finite());
        if b != 0.0 {
            prop_assert_eq!(bbar.signum(), b.signum());
        }
    }

    /// Chunking the recurrence at any block size leaves the outputs where
    /// the one-step-at-a-time scan puts them.
    #[test]
    fn blocked_scan_matches_sequential(
        rows in 1usize..48,
        ch in 1usize..3,
        ns in 1usize..3,
        block in 1usize..48,
        seed in 0u64..1_000_000,
    ) {
        let block = block.min(rows);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut arr = |shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            DenseArray::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        };
        let a = arr(&[ch, ns], -2.0, -0.05);
        let b_seq = arr(&[rows, ns], -1.0, 1.0);
        let delta = arr(&[rows, ch], 1e-4, 0.2);
        let x = arr(&[rows, ch], -1.0, 1.0);
        let c_seq = arr(&[rows, ns], -1.0, 1.0);
        let disc = discretize_sequence(&a, &b_seq, &delta).unwrap();
        let seq = scan_sequential(&disc, &x, &c_seq, None).unwrap();
        let blk = scan_blocked(&disc, &x, &c_seq, None, block).unwrap();
        for (s, v) in seq.data().iter().zip(blk.data()) {
            prop_assert!((s - v).abs() < 1e-9, "gap {} at block {block}", (s - v).abs());
        }
    }

    /// The padded per-scan layout is a partition: every row gets exactly one
    /// slot inside its scan's stripe, the mask marks exactly those slots,
    /// and the conv segments tile the padded length.
    #[test]
    fn ra_layout_partitions_rows(counts in prop::collection::vec(0usize..12, 1..6)) {
        let scan_ids: Vec<u32> = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| std::iter::repeat_n(s as u32, c))
            .collect();
        let n_scans = counts.len();
        let layout = ra_layout(&scan_ids, n_scans).unwrap();

        prop_assert_eq!(layout.pad_len, counts.iter().copied().max().unwrap_or(0));
        let padded = n_scans * layout.pad_len;
        prop_assert_eq!(layout.mask.len(), padded);
        prop_assert_eq!(layout.segments.iter().sum::<usize>(), padded);

        let mut used = vec![false; padded];
        for (row, &slot) in layout.slot_of_row.iter().enumerate() {
            prop_assert!(!used[slot], "slot {slot} assigned twice");
            used[slot] = true;
            let scan = scan_ids[row] as usize;
            prop_assert!(slot / layout.pad_len == scan, "row of scan {scan} left its stripe");
        }
        for (slot, &m) in layout.mask.iter().enumerate() {
            prop_assert_eq!(m, used[slot], "mask wrong at slot {}", slot);
        }
    }

    /// Intersection-over-union stays inside the unit interval and is `None`
    /// exactly when the union is empty.
    #[test]
    fn iou_bounds(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let c = ConfusionCounts { tp, fp, fn_ };
        match c.iou() {
            None => prop_assert_eq!(tp + fp + fn_, 0),
            Some(v) => {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(tp + fp + fn_ > 0);
            }
        }
    }

    /// The Jaccard surrogate is a mean of convex extensions of set losses,
    /// so it stays inside `[0, 1]` on any probability rows.
    #[test]
    fn lovasz_stays_in_unit_interval(
        raw in prop::collection::vec(0.01f64..1.0, 3..30),
        targets in prop::collection::vec(-1i64..3, 1..10),
    ) {
        let n = targets.len().min(raw.len() / 3);
        prop_assume!(n > 0);
        let targets = &targets[..n];
        prop_assume!(targets.iter().any(|&t| t >= 0));
        let mut data = Vec::with_capacity(n * 3);
        for row in raw.chunks(3).take(n) {
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        let mut tape = Tape::new();
        let probs = tape.leaf(DenseArray::from_vec(&[n, 3], data)).unwrap();
        let loss = lovasz_softmax(&mut tape, probs, targets, -1).unwrap();
        let v = tape.value(loss).item();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "loss {v} escaped [0, 1]");
    }
}
