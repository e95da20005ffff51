use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u16;

/// Class id 0 is always the empty / background class.
pub const EMPTY: ClassId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Empty,
    Thing,
    Stuff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered class list. Entry 0 is the empty class; the rest are things or stuff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassInfo>", into = "Vec<ClassInfo>")]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.first().map(|c| c.kind) != Some(ClassKind::Empty) {
            return Err(Error::InvalidConfig(
                "class table must start with the empty class".into(),
            ));
        }
        if classes[1..].iter().any(|c| c.kind == ClassKind::Empty) {
            return Err(Error::InvalidConfig(
                "only class 0 may be the empty class".into(),
            ));
        }
        if classes.len() > ClassId::MAX as usize {
            return Err(Error::InvalidConfig("too many classes".into()));
        }
        let table = Self { classes };
        if table.thing_classes().next().is_none() || table.stuff_classes().next().is_none() {
            return Err(Error::InvalidConfig(
                "class table needs at least one thing and one stuff class".into(),
            ));
        }
        Ok(table)
    }

    /// A scaled-down street-scene vocabulary.
    pub fn street() -> Self {
        let entry = |name: &str, kind| ClassInfo {
            name: name.to_string(),
            kind,
        };
        Self::new(vec![
            entry("empty", ClassKind::Empty),
            entry("car", ClassKind::Thing),
            entry("pedestrian", ClassKind::Thing),
            entry("barrier", ClassKind::Thing),
            entry("driveable_surface", ClassKind::Stuff),
            entry("sidewalk", ClassKind::Stuff),
        ])
        .expect("built-in class table is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn kind(&self, class: ClassId) -> Option<ClassKind> {
        self.classes.get(class as usize).map(|c| c.kind)
    }

    pub fn name(&self, class: ClassId) -> Option<&str> {
        self.classes.get(class as usize).map(|c| c.name.as_str())
    }

    pub fn is_thing(&self, class: ClassId) -> bool {
        self.kind(class) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, class: ClassId) -> bool {
        self.kind(class) == Some(ClassKind::Stuff)
    }

    pub fn thing_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.ids_of(ClassKind::Thing)
    }

    pub fn stuff_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.ids_of(ClassKind::Stuff)
    }

    fn ids_of(&self, kind: ClassKind) -> impl Iterator<Item = ClassId> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.kind == kind)
            .map(|(i, _)| i as ClassId)
    }
}

impl TryFrom<Vec<ClassInfo>> for ClassTable {
    type Error = Error;

    fn try_from(value: Vec<ClassInfo>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ClassTable> for Vec<ClassInfo> {
    fn from(value: ClassTable) -> Self {
        value.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn street_table_layout() {
        let t = ClassTable::street();
        assert_eq!(t.kind(EMPTY), Some(ClassKind::Empty));
        assert_eq!(t.thing_classes().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(t.stuff_classes().collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn rejects_table_without_stuff() {
        let err = ClassTable::new(vec![
            ClassInfo {
                name: "empty".into(),
                kind: ClassKind::Empty,
            },
            ClassInfo {
                name: "car".into(),
                kind: ClassKind::Thing,
            },
        ]);
        assert!(err.is_err());
    }
}
