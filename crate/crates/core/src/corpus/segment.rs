use ndarray::s;

use super::{DomainLabel, FeatureMatrix, SegmentRecord};

/// Frames per FHVAE segment (200 ms at 10 ms advance).
pub const SEGMENT_FRAMES: usize = 20;
/// Segment shift used while training.
pub const TRAIN_SHIFT: usize = 8;

/// Number of segments of `seg_len` frames at stride `shift` in `t` frames.
pub fn segment_count(t: usize, seg_len: usize, shift: usize) -> usize {
    assert!(shift >= 1, "segment shift must be at least 1");
    if t < seg_len {
        0
    } else {
        (t - seg_len) / shift + 1
    }
}

/// Slice `feat` into segments at offsets `0, shift, 2·shift, …`. Utterances
/// shorter than one segment yield nothing.
pub fn segment_utterance(
    feat: &FeatureMatrix,
    seg_len: usize,
    shift: usize,
    sequence_id: usize,
    domain_label: DomainLabel,
) -> Vec<SegmentRecord> {
    let n = segment_count(feat.num_frames(), seg_len, shift);
    if n == 0 {
        log::warn!(
            "sequence {sequence_id}: {} frames is shorter than one {seg_len}-frame segment; dropped",
            feat.num_frames()
        );
    }
    (0..n)
        .map(|k| {
            let offset = k * shift;
            SegmentRecord {
                x: feat.frames.slice(s![offset..offset + seg_len, ..]).to_owned(),
                sequence_id,
                domain_label,
                frame_offset: offset,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn ramp(t: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_shape_fn((t, d), |(i, j)| (i * d + j) as f32)).unwrap()
    }

    #[test]
    fn worked_examples() {
        let segs = segment_utterance(&ramp(20, 3), 20, 8, 0, DomainLabel::Control);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].frame_offset, 0);
        let segs = segment_utterance(&ramp(36, 3), 20, 8, 0, DomainLabel::Control);
        assert_eq!(segs.iter().map(|s| s.frame_offset).collect::<Vec<_>>(), vec![0, 8, 16]);
        assert_eq!(segment_utterance(&ramp(36, 3), 20, 1, 0, DomainLabel::Control).len(), 17);
        assert!(segment_utterance(&ramp(19, 3), 20, 1, 0, DomainLabel::Control).is_empty());
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(t in 0usize..=500, shift in 1usize..=20) {
            let mut naive = 0;
            let mut off = 0;
            while off + SEGMENT_FRAMES <= t {
                naive += 1;
                off += shift;
            }
            prop_assert_eq!(segment_count(t, SEGMENT_FRAMES, shift), naive);
        }

        #[test]
        fn slices_are_copy_exact(t in 20usize..120, shift in 1usize..20) {
            let feat = ramp(t, 4);
            for seg in segment_utterance(&feat, SEGMENT_FRAMES, shift, 3, DomainLabel::Dysarthric) {
                prop_assert!(seg.frame_offset + SEGMENT_FRAMES <= t);
                prop_assert_eq!(seg.x.nrows(), SEGMENT_FRAMES);
                for r in 0..SEGMENT_FRAMES {
                    prop_assert_eq!(seg.x.row(r), feat.frames.row(seg.frame_offset + r));
                }
            }
        }
    }
}
