//! Published whole-model parameter counts, reproduced from the backbone
//! registry plus closed-form head counts.

use crate::backbone::{feature_map_spec, registry_lookup};
use crate::error::Result;
use crate::heads::{head_param_count, HeadKind, HeadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PublishedCount {
    pub table: &'static str,
    pub backbone: &'static str,
    pub input_side: usize,
    pub classes: usize,
    pub head: HeadKind,
    pub pool_kernel: Option<usize>,
    pub expected: u64,
}

impl PublishedCount {
    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            pool_kernel: self.pool_kernel,
            ..HeadSpec::new(self.head, self.classes)
        }
    }

    /// `(base, head, total)` computed from geometry alone.
    pub fn reproduce(&self) -> Result<(u64, u64, u64)> {
        model_param_count(self.backbone, self.input_side, &self.head_spec())
    }
}

/// `(base, head, total)` for a registered backbone at the given input side.
pub fn model_param_count(backbone: &str, input_side: usize, head: &HeadSpec) -> Result<(u64, u64, u64)> {
    let entry = registry_lookup(backbone)?;
    let fm = feature_map_spec(&entry, input_side)?;
    let h = head_param_count(&fm, head)?;
    Ok((entry.base_params, h, entry.base_params + h))
}

const fn row(
    table: &'static str,
    backbone: &'static str,
    input_side: usize,
    classes: usize,
    head: HeadKind,
    pool_kernel: Option<usize>,
    expected: u64,
) -> PublishedCount {
    PublishedCount {
        table,
        backbone,
        input_side,
        classes,
        head,
        pool_kernel,
        expected,
    }
}

use HeadKind::*;

const T1: &str = "parameters, 70 classes, 224";
const SUB: &str = "sub-imagenet, 70 classes, 224";
const INTEL: &str = "intel, 6 classes, 224";
const MIT: &str = "mit indoor, 67 classes, 224";
const MIT512: &str = "mit indoor, 67 classes, 512";

pub const PUBLISHED_COUNTS: &[PublishedCount] = &[
    row(T1, "resnet50", 224, 70, Gap, None, 23_731_142),
    row(T1, "resnet50", 224, 70, Dw, None, 23_833_542),
    row(T1, "resnet50", 224, 70, AvgDwNonneg, Some(2), 23_751_622),
    row(T1, "xception", 224, 70, Gap, None, 21_004_910),
    row(T1, "xception", 224, 70, Dw, None, 21_107_310),
    row(T1, "xception", 224, 70, AvgDwNonneg, Some(2), 21_025_390),
    row(T1, "densenet121", 224, 70, Gap, None, 7_109_254),
    row(T1, "densenet121", 224, 70, Dw, None, 7_160_454),
    row(T1, "densenet121", 224, 70, AvgDwNonneg, Some(2), 7_119_494),
    row(SUB, "xception", 224, 70, Gap, None, 21_004_910),
    row(SUB, "xception", 224, 70, GapDropout, None, 21_004_910),
    row(SUB, "xception", 224, 70, Dw, None, 21_107_310),
    row(SUB, "xception", 224, 70, DwNonneg, None, 21_107_310),
    row(SUB, "xception", 224, 70, AvgDwNonneg, Some(2), 21_025_390),
    row(SUB, "xception", 224, 70, AvgDwNonnegDropout, Some(2), 21_025_390),
    row(SUB, "resnet50", 224, 70, Gap, None, 23_731_142),
    row(SUB, "resnet50", 224, 70, GapDropout, None, 23_731_142),
    row(SUB, "resnet50", 224, 70, Dw, None, 23_833_542),
    row(SUB, "resnet50", 224, 70, DwNonneg, None, 23_833_542),
    row(SUB, "resnet50", 224, 70, AvgDwNonneg, Some(2), 23_751_622),
    row(SUB, "resnet50", 224, 70, AvgDwNonnegDropout, Some(2), 23_751_622),
    row(SUB, "densenet121", 224, 70, Gap, None, 7_109_254),
    row(SUB, "densenet121", 224, 70, GapDropout, None, 7_109_254),
    row(SUB, "densenet121", 224, 70, Dw, None, 7_160_454),
    row(SUB, "densenet121", 224, 70, DwNonneg, None, 7_160_454),
    row(SUB, "densenet121", 224, 70, AvgDwNonneg, Some(2), 7_119_494),
    row(SUB, "densenet121", 224, 70, AvgDwNonnegDropout, Some(2), 7_119_494),
    row(INTEL, "xception", 224, 6, Gap, None, 20_873_774),
    row(INTEL, "xception", 224, 6, DwNonneg, None, 20_976_174),
    row(INTEL, "xception", 224, 6, AvgDwNonneg, Some(2), 20_894_254),
    row(INTEL, "resnet50", 224, 6, Gap, None, 23_600_006),
    row(INTEL, "resnet50", 224, 6, DwNonneg, None, 23_702_406),
    row(INTEL, "resnet50", 224, 6, AvgDwNonneg, Some(2), 23_620_486),
    row(INTEL, "densenet169", 224, 6, Gap, None, 12_652_870),
    row(INTEL, "densenet169", 224, 6, DwNonneg, None, 12_736_070),
    row(INTEL, "densenet169", 224, 6, AvgDwNonneg, Some(2), 12_669_510),
    row(MIT, "xception", 224, 67, Gap, None, 20_998_763),
    row(MIT, "xception", 224, 67, GapDropout, None, 20_998_763),
    row(MIT, "xception", 224, 67, DwNonneg, None, 21_101_163),
    row(MIT, "xception", 224, 67, AvgDwNonneg, Some(2), 21_019_243),
    row(MIT, "xception", 224, 67, AvgDwNonnegDropout, Some(2), 21_019_243),
    row(MIT, "resnet50", 224, 67, Gap, None, 23_724_995),
    row(MIT, "resnet50", 224, 67, GapDropout, None, 23_724_995),
    row(MIT, "resnet50", 224, 67, DwNonneg, None, 23_827_395),
    row(MIT, "resnet50", 224, 67, AvgDwNonneg, Some(2), 23_745_475),
    row(MIT, "resnet50", 224, 67, AvgDwNonnegDropout, Some(2), 23_745_475),
    row(MIT, "densenet169", 224, 67, Gap, None, 12_754_435),
    row(MIT, "densenet169", 224, 67, GapDropout, None, 12_754_435),
    row(MIT, "densenet169", 224, 67, DwNonneg, None, 12_837_635),
    row(MIT, "densenet169", 224, 67, AvgDwNonneg, Some(2), 12_771_075),
    row(MIT, "densenet169", 224, 67, AvgDwNonnegDropout, Some(2), 12_771_075),
    row(MIT512, "xception", 512, 67, Gap, None, 20_998_763),
    row(MIT512, "xception", 512, 67, AvgFlattenFc, Some(3), 24_291_947),
    row(MIT512, "xception", 512, 67, AvgDwNonneg, Some(3), 21_052_011),
    row(MIT512, "resnet50v2", 512, 67, Gap, None, 23_702_083),
    row(MIT512, "resnet50v2", 512, 67, AvgFlattenFc, Some(3), 26_995_267),
    row(MIT512, "resnet50v2", 512, 67, AvgDwNonneg, Some(3), 23_755_331),
    row(MIT512, "densenet201", 512, 67, Gap, None, 18_450_691),
    row(MIT512, "densenet201", 512, 67, AvgFlattenFc, Some(3), 21_538_051),
    row(MIT512, "densenet201", 512, 67, AvgDwNonneg, Some(3), 18_500_611),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_published_count_reproduces() {
        for r in PUBLISHED_COUNTS {
            let (_, _, total) = r.reproduce().unwrap();
            assert_eq!(total, r.expected, "{r:?}");
        }
    }

    #[test]
    fn spot_checks() {
        let spec = HeadSpec::new(HeadKind::AvgFlattenFc, 67).with_pool(3);
        assert_eq!(model_param_count("densenet201", 512, &spec).unwrap().2, 21_538_051);
        assert!(model_param_count("vgg16", 224, &spec).is_err());
    }
}
