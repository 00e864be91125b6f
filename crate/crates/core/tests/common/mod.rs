use mammofuse::dataset::{Split, SplitCase};

/// 2254 cases: 693 unassigned normals, 348 abnormal cases pinned to test and
/// 1213 pinned to train, with the published density/lesion/pathology marginals.
pub fn preassigned_fixture() -> Vec<SplitCase> {
    let densities = ["a", "b", "c", "d"];
    let mut cases = Vec::new();
    let mut push = |n: usize, lesion: &str, patho: &str, pre: Option<Split>| {
        for _ in 0..n {
            let i = cases.len();
            cases.push(SplitCase {
                case_id: format!("P_{i:05}"),
                strata: vec![
                    densities[(i * 7) % 4].to_string(),
                    lesion.to_string(),
                    patho.to_string(),
                ],
                preassigned: pre,
            });
        }
    };
    push(693, "normal", "normal", None);
    // test: mass 201 (benign 110, malignant 91), calcification 147 (benign 89, malignant 58)
    push(110, "mass", "benign", Some(Split::Test));
    push(91, "mass", "malignant", Some(Split::Test));
    push(89, "calcification", "benign", Some(Split::Test));
    push(58, "calcification", "malignant", Some(Split::Test));
    // train pool: mass 676, calcification 537; benign 620, malignant 593
    push(330, "mass", "benign", Some(Split::Train));
    push(346, "mass", "malignant", Some(Split::Train));
    push(290, "calcification", "benign", Some(Split::Train));
    push(247, "calcification", "malignant", Some(Split::Train));
    cases
}
