//! Panoptic label rasters and the category table they refer to.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::raster::Raster;

/// Reserved class id for void / outside the field of view.
pub const VOID: u16 = 0;

/// Morphology group a class belongs to during densification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassGroup {
    #[serde(rename = "St_T")]
    TallStuff,
    #[serde(rename = "St_S")]
    ShortStuff,
    #[serde(rename = "Veg")]
    Vegetation,
    #[serde(rename = "Th_V")]
    Vehicle,
    #[serde(rename = "Th_P")]
    Person,
    /// Classes produced by the pipeline itself (occlusion); never densified.
    #[serde(rename = "none")]
    Unmorphed,
}

impl ClassGroup {
    pub const MORPHED: [ClassGroup; 5] = [
        ClassGroup::TallStuff,
        ClassGroup::ShortStuff,
        ClassGroup::Vegetation,
        ClassGroup::Vehicle,
        ClassGroup::Person,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ClassGroup::TallStuff => "St_T",
            ClassGroup::ShortStuff => "St_S",
            ClassGroup::Vegetation => "Veg",
            ClassGroup::Vehicle => "Th_V",
            ClassGroup::Person => "Th_P",
            ClassGroup::Unmorphed => "none",
        }
    }

    pub fn is_thing(self) -> bool {
        matches!(self, ClassGroup::Vehicle | ClassGroup::Person)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u16,
    pub name: String,
    pub is_thing: bool,
    pub group: ClassGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    categories: Vec<Category>,
    occlusion_id: u16,
}

impl CategoryTable {
    pub fn new(mut categories: Vec<Category>, occlusion_id: u16) -> Result<Self> {
        categories.sort_by_key(|c| c.id);
        for w in categories.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::InvalidInput(format!("duplicate category id {}", w[0].id)));
            }
        }
        for c in &categories {
            if c.id == VOID {
                return Err(Error::InvalidInput("category id 0 is reserved for void".into()));
            }
            if c.is_thing != c.group.is_thing() {
                return Err(Error::InvalidInput(format!(
                    "category {} is_thing disagrees with group {:?}",
                    c.name, c.group
                )));
            }
        }
        let table = Self {
            categories,
            occlusion_id,
        };
        match table.get(occlusion_id) {
            Some(c) if !c.is_thing => Ok(table),
            _ => Err(Error::InvalidInput(format!(
                "occlusion id {occlusion_id} must be a stuff category"
            ))),
        }
    }

    /// Default BEV label set.
    pub fn bev_default() -> Self {
        use ClassGroup::*;
        let spec: [(u16, &str, ClassGroup); 16] = [
            (1, "road", ShortStuff),
            (2, "sidewalk", ShortStuff),
            (3, "parking", ShortStuff),
            (4, "terrain", ShortStuff),
            (5, "fence", ShortStuff),
            (6, "building", TallStuff),
            (7, "wall", TallStuff),
            (8, "pole", TallStuff),
            (9, "traffic_sign", TallStuff),
            (10, "vegetation", Vegetation),
            (11, "occlusion", Unmorphed),
            (12, "car", Vehicle),
            (13, "truck", Vehicle),
            (14, "bicycle", Vehicle),
            (15, "person", Person),
            (16, "rider", Person),
        ];
        let categories = spec
            .iter()
            .map(|&(id, name, group)| Category {
                id,
                name: name.to_string(),
                is_thing: group.is_thing(),
                group,
            })
            .collect();
        Self::new(categories, 11).expect("default table is valid")
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn occlusion_id(&self) -> u16 {
        self.occlusion_id
    }

    pub fn get(&self, id: u16) -> Option<&Category> {
        self.categories
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.categories[i])
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn is_thing(&self, id: u16) -> bool {
        self.get(id).is_some_and(|c| c.is_thing)
    }

    pub fn group(&self, id: u16) -> Option<ClassGroup> {
        self.get(id).map(|c| c.group)
    }

    pub fn stuff_ids(&self) -> Vec<u16> {
        self.categories.iter().filter(|c| !c.is_thing).map(|c| c.id).collect()
    }

    pub fn thing_ids(&self) -> Vec<u16> {
        self.categories.iter().filter(|c| c.is_thing).map(|c| c.id).collect()
    }
}

/// Per-pixel `(class_id, instance_index)` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticBevMap {
    pub class: Raster<u16>,
    pub instance: Raster<u16>,
    pub categories: Arc<CategoryTable>,
    pub grid: Option<BevGridSpec>,
}

impl PanopticBevMap {
    pub fn empty(width: usize, height: usize, categories: Arc<CategoryTable>) -> Self {
        Self {
            class: Raster::filled(width, height, VOID),
            instance: Raster::filled(width, height, 0),
            categories,
            grid: None,
        }
    }

    pub fn for_grid(grid: &BevGridSpec, categories: Arc<CategoryTable>) -> Self {
        let mut m = Self::empty(grid.cells_x, grid.cells_z, categories);
        m.grid = Some(*grid);
        m
    }

    pub fn from_parts(class: Raster<u16>, instance: Raster<u16>, categories: Arc<CategoryTable>) -> Result<Self> {
        if !class.same_shape(&instance) {
            return Err(Error::ShapeMismatch("class and instance rasters differ in size".into()));
        }
        Ok(Self {
            class,
            instance,
            categories,
            grid: None,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.class.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.class.height()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (u16, u16) {
        (*self.class.get(row, col), *self.instance.get(row, col))
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u16, instance: u16) {
        self.class.set(row, col, class);
        self.instance.set(row, col, instance);
    }

    pub fn same_shape(&self, other: &PanopticBevMap) -> bool {
        self.class.same_shape(&other.class)
    }

    pub fn labeled_count(&self) -> usize {
        self.class.iter().filter(|&&c| c != VOID).count()
    }

    /// Checks the class/instance invariants against the category table.
    pub fn validate(&self) -> Result<()> {
        for (i, (&c, &inst)) in self.class.iter().zip(self.instance.iter()).enumerate() {
            if c == VOID {
                if inst != 0 {
                    return Err(Error::Invariant(format!("void pixel {i} has instance {inst}")));
                }
                continue;
            }
            let cat = self.categories.get(c).ok_or(Error::UnknownClass(c))?;
            if !cat.is_thing && inst != 0 {
                return Err(Error::Invariant(format!(
                    "stuff class {c} carries instance {inst} at pixel {i}"
                )));
            }
        }
        Ok(())
    }

    /// Pixel count of every `(class, instance)` segment, void excluded.
    pub fn segment_areas(&self) -> BTreeMap<(u16, u16), usize> {
        let mut areas = BTreeMap::new();
        for (&c, &i) in self.class.iter().zip(self.instance.iter()) {
            if c != VOID {
                *areas.entry((c, i)).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Number of distinct thing instances with a nonzero index.
    pub fn instance_count(&self) -> usize {
        self.segment_areas()
            .keys()
            .filter(|(c, i)| *i != 0 && self.categories.is_thing(*c))
            .count()
    }
}
