use std::collections::BTreeSet;

use super::morphology::close;
use super::MorphKernelTable;
use crate::error::Result;
use crate::panoptic::{CategoryTable, ClassGroup, PanopticBevMap, VOID};
use crate::raster::Raster;

/// Compositing order: tall stuff, short stuff, things, then vegetation; ties
/// by class id.
pub fn densify_order(categories: &CategoryTable, classes: impl IntoIterator<Item = u16>) -> Vec<u16> {
    let rank = |c: u16| match categories.group(c) {
        Some(ClassGroup::TallStuff) => 0,
        Some(ClassGroup::ShortStuff) => 1,
        Some(ClassGroup::Vehicle) | Some(ClassGroup::Person) => 2,
        Some(ClassGroup::Vegetation) => 3,
        _ => 4,
    };
    let mut v: Vec<u16> = classes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by_key(|&c| (rank(c), c));
    v
}

/// Per-class closing of a sparse label map.
///
/// The canvas starts as the sparse map. Each class, in [`densify_order`],
/// writes its closed mask into still-void pixels only, and vegetation goes
/// last so it only fills pixels no other class claimed. Sparse vegetation
/// pixels are cells where nothing but vegetation was observed, so other
/// classes do not grow into them. Newly filled thing pixels carry instance 0
/// until instance fusion.
pub fn densify(sparse: &PanopticBevMap, kernels: &MorphKernelTable) -> Result<PanopticBevMap> {
    let categories = sparse.categories.clone();
    let present: BTreeSet<u16> = sparse.class.iter().copied().filter(|&c| c != VOID).collect();
    let mut sizes = Vec::with_capacity(present.len());
    for &c in &present {
        sizes.push((c, kernels.for_class(&categories, c)?));
    }

    let mut out = sparse.clone();

    for class in densify_order(&categories, present.iter().copied()) {
        let k = sizes.iter().find(|(c, _)| *c == class).map(|(_, k)| *k).expect("size looked up");
        let mask = sparse.class.map(|&c| c == class);
        let closed: Raster<bool> = close(&mask, k.dilation, k.erosion);
        for (i, &fill) in closed.iter().enumerate() {
            if fill && out.class.as_slice()[i] == VOID {
                out.class.as_mut_slice()[i] = class;
            }
        }
    }
    Ok(out)
}
