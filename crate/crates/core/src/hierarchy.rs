//! Label vocabularies and the disjoint predicate → super-category partition.
//!
//! A [`LabelSpace`] is immutable once built. Every predicate belongs to exactly
//! one super-category and every super-category owns at least one predicate.
//! Object categories may optionally carry their own super-category; objects
//! without an entry fall back to a shared `"object"` group.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Name of the implicit object super-category.
pub const DEFAULT_OBJECT_SUPER: &str = "object";

/// Bundled 150-object / 50-predicate hierarchy in the file format below.
pub const VG150_HIERARCHY_JSON: &str = include_str!("../data/vg150_hierarchy.json");

macro_rules! index_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

index_newtype!(
    /// Index into [`LabelSpace::predicates`].
    PredicateId
);
index_newtype!(
    /// Index into [`LabelSpace::supers`].
    SuperCategoryId
);
index_newtype!(
    /// Index into [`LabelSpace::objects`].
    ObjectCategoryId
);

/// On-disk hierarchy document.
///
/// ```json
/// {"objects": [...], "object_supers": {"name": "super"},
///  "predicates": [...], "predicate_supers": {"name": "super"}, "supers": [...]}
/// ```
///
/// `object_supers` is optional. A predicate listed twice in
/// `predicate_supers`, or mapped to a list of several supers, is rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    pub objects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_supers: Option<AssignmentList>,
    pub predicates: Vec<String>,
    pub predicate_supers: AssignmentList,
    pub supers: Vec<String>,
}

/// Name → super assignments, preserving duplicates so they can be reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentList(pub Vec<(String, Vec<String>)>);

impl AssignmentList {
    pub fn single<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        AssignmentList(
            pairs
                .into_iter()
                .map(|(a, b)| (a.into(), vec![b.into()]))
                .collect(),
        )
    }
}

impl Serialize for AssignmentList {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (name, supers) in &self.0 {
            if supers.len() == 1 {
                map.serialize_entry(name, &supers[0])?;
            } else {
                map.serialize_entry(name, supers)?;
            }
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for AssignmentList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            One(String),
            Many(Vec<String>),
        }

        struct ListVisitor;

        impl<'de> Visitor<'de> for ListVisitor {
            type Value = AssignmentList;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map from names to super-category names")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((key, value)) = access.next_entry::<String, OneOrMany>()? {
                    let supers = match value {
                        OneOrMany::One(s) => vec![s],
                        OneOrMany::Many(v) => v,
                    };
                    out.push((key, supers));
                }
                Ok(AssignmentList(out))
            }
        }

        deserializer.deserialize_map(ListVisitor)
    }
}

/// Object and predicate vocabularies plus the predicate partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    objects: Vec<String>,
    object_supers: Vec<String>,
    object_to_super: Vec<usize>,
    predicates: Vec<String>,
    supers: Vec<String>,
    predicate_to_super: Vec<SuperCategoryId>,
    members: Vec<Vec<PredicateId>>,
    local_index: Vec<usize>,
    object_lookup: HashMap<String, usize>,
    predicate_lookup: HashMap<String, usize>,
    notes: Option<String>,
}

fn lookup_table(names: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(Error::Hierarchy(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(map)
}

impl LabelSpace {
    pub fn from_file(file: HierarchyFile) -> Result<Self> {
        if file.objects.is_empty() {
            return Err(Error::Hierarchy("no object categories".into()));
        }
        if file.predicates.is_empty() {
            return Err(Error::Hierarchy("no predicates".into()));
        }
        if file.supers.is_empty() {
            return Err(Error::Hierarchy("no super-categories".into()));
        }
        let object_lookup = lookup_table(&file.objects, "object")?;
        let predicate_lookup = lookup_table(&file.predicates, "predicate")?;
        let super_lookup = lookup_table(&file.supers, "super-category")?;

        let mut assigned: Vec<Option<usize>> = vec![None; file.predicates.len()];
        for (name, supers) in &file.predicate_supers.0 {
            let p = *predicate_lookup
                .get(name)
                .ok_or_else(|| Error::Hierarchy(format!("unknown predicate {name:?}")))?;
            if supers.len() != 1 || assigned[p].is_some() {
                return Err(Error::Hierarchy(format!(
                    "predicate {name:?} assigned to more than one super-category"
                )));
            }
            let s = *super_lookup.get(&supers[0]).ok_or_else(|| {
                Error::Hierarchy(format!("unknown super-category {:?}", supers[0]))
            })?;
            assigned[p] = Some(s);
        }
        let mut predicate_to_super = Vec::with_capacity(assigned.len());
        for (p, a) in assigned.iter().enumerate() {
            match a {
                Some(s) => predicate_to_super.push(SuperCategoryId(*s)),
                None => {
                    return Err(Error::Hierarchy(format!(
                        "predicate {:?} has no super-category",
                        file.predicates[p]
                    )))
                }
            }
        }

        let mut members = vec![Vec::new(); file.supers.len()];
        let mut local_index = vec![0; file.predicates.len()];
        for (p, s) in predicate_to_super.iter().enumerate() {
            local_index[p] = members[s.0].len();
            members[s.0].push(PredicateId(p));
        }
        if let Some(s) = members.iter().position(Vec::is_empty) {
            return Err(Error::Hierarchy(format!(
                "super-category {:?} has no predicates",
                file.supers[s]
            )));
        }

        let (object_supers, object_to_super) =
            Self::object_partition(&file.objects, &object_lookup, file.object_supers.as_ref())?;

        Ok(LabelSpace {
            objects: file.objects,
            object_supers,
            object_to_super,
            predicates: file.predicates,
            supers: file.supers,
            predicate_to_super,
            members,
            local_index,
            object_lookup,
            predicate_lookup,
            notes: file.notes,
        })
    }

    fn object_partition(
        objects: &[String],
        lookup: &HashMap<String, usize>,
        assignments: Option<&AssignmentList>,
    ) -> Result<(Vec<String>, Vec<usize>)> {
        let mut per_object: Vec<Option<String>> = vec![None; objects.len()];
        if let Some(list) = assignments {
            for (name, supers) in &list.0 {
                let o = *lookup
                    .get(name)
                    .ok_or_else(|| Error::Hierarchy(format!("unknown object {name:?}")))?;
                if supers.len() != 1 || per_object[o].is_some() {
                    return Err(Error::Hierarchy(format!(
                        "object {name:?} assigned to more than one super-category"
                    )));
                }
                per_object[o] = Some(supers[0].clone());
            }
        }
        let mut names: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(objects.len());
        for entry in per_object {
            let name = entry.unwrap_or_else(|| DEFAULT_OBJECT_SUPER.to_string());
            let id = match names.iter().position(|n| *n == name) {
                Some(i) => i,
                None => {
                    names.push(name);
                    names.len() - 1
                }
            };
            ids.push(id);
        }
        Ok((names, ids))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    /// Reads and validates a hierarchy file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// The bundled 150-object / 50-predicate hierarchy.
    pub fn vg150() -> Self {
        Self::from_json_str(VG150_HIERARCHY_JSON).expect("bundled hierarchy is valid")
    }

    /// Builds a space from per-super predicate lists.
    pub fn from_groups(objects: Vec<String>, groups: &[(String, Vec<String>)]) -> Result<Self> {
        let supers: Vec<String> = groups.iter().map(|(s, _)| s.clone()).collect();
        let mut predicates = Vec::new();
        let mut assignments = Vec::new();
        for (s, preds) in groups {
            for p in preds {
                predicates.push(p.clone());
                assignments.push((p.clone(), vec![s.clone()]));
            }
        }
        Self::from_file(HierarchyFile {
            notes: None,
            objects,
            object_supers: None,
            predicates,
            predicate_supers: AssignmentList(assignments),
            supers,
        })
    }

    /// Same vocabularies with every predicate moved into one super-category.
    pub fn flattened(&self) -> Self {
        let groups = vec![("all".to_string(), self.predicates.clone())];
        let mut flat = Self::from_groups(self.objects.clone(), &groups).expect("valid by construction");
        flat.object_supers = self.object_supers.clone();
        flat.object_to_super = self.object_to_super.clone();
        flat
    }

    pub fn to_file(&self) -> HierarchyFile {
        let has_object_supers = !(self.object_supers.len() == 1
            && self.object_supers[0] == DEFAULT_OBJECT_SUPER);
        HierarchyFile {
            notes: self.notes.clone(),
            objects: self.objects.clone(),
            object_supers: has_object_supers.then(|| {
                AssignmentList::single(
                    self.objects
                        .iter()
                        .zip(&self.object_to_super)
                        .map(|(o, &s)| (o.clone(), self.object_supers[s].clone())),
                )
            }),
            predicates: self.predicates.clone(),
            predicate_supers: AssignmentList::single(
                self.predicates
                    .iter()
                    .zip(&self.predicate_to_super)
                    .map(|(p, s)| (p.clone(), self.supers[s.0].clone())),
            ),
            supers: self.supers.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("hierarchy serializes")
    }

    /// Hex SHA-256 over the vocabularies and the partition. Notes are ignored.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "objects": self.objects,
            "object_supers": self.object_to_super.iter().map(|&s| &self.object_supers[s]).collect::<Vec<_>>(),
            "predicates": self.predicates,
            "predicate_supers": self.predicate_to_super,
            "supers": self.supers,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn supers(&self) -> &[String] {
        &self.supers
    }

    pub fn object_supers(&self) -> &[String] {
        &self.object_supers
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_supers(&self) -> usize {
        self.supers.len()
    }

    pub fn num_object_supers(&self) -> usize {
        self.object_supers.len()
    }

    /// Number of predicates in each super-category, in super order.
    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn check_predicate(&self, p: PredicateId) -> Result<()> {
        if p.0 < self.predicates.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                kind: "predicate",
                index: p.0,
                size: self.predicates.len(),
            })
        }
    }

    pub fn check_object(&self, o: ObjectCategoryId) -> Result<()> {
        if o.0 < self.objects.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                kind: "object category",
                index: o.0,
                size: self.objects.len(),
            })
        }
    }

    /// The unique super-category containing `p`.
    pub fn super_of(&self, p: PredicateId) -> Result<SuperCategoryId> {
        self.check_predicate(p)?;
        Ok(self.predicate_to_super[p.0])
    }

    /// Predicates of super-category `s`, in increasing id order.
    pub fn predicates_in(&self, s: SuperCategoryId) -> Result<&[PredicateId]> {
        self.members
            .get(s.0)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfRange {
                kind: "super-category",
                index: s.0,
                size: self.supers.len(),
            })
    }

    /// Position of `p` inside `predicates_in(super_of(p))`.
    pub fn local_index(&self, p: PredicateId) -> Result<usize> {
        self.check_predicate(p)?;
        Ok(self.local_index[p.0])
    }

    pub fn object_super_of(&self, o: ObjectCategoryId) -> Result<usize> {
        self.check_object(o)?;
        Ok(self.object_to_super[o.0])
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredicateId> {
        self.predicate_lookup.get(name).copied().map(PredicateId)
    }

    pub fn object_id(&self, name: &str) -> Option<ObjectCategoryId> {
        self.object_lookup.get(name).copied().map(ObjectCategoryId)
    }

    pub fn super_id(&self, name: &str) -> Option<SuperCategoryId> {
        self.supers.iter().position(|s| s == name).map(SuperCategoryId)
    }

    pub fn predicate_name(&self, p: PredicateId) -> &str {
        &self.predicates[p.0]
    }

    pub fn object_name(&self, o: ObjectCategoryId) -> &str {
        &self.objects[o.0]
    }

    pub fn super_name(&self, s: SuperCategoryId) -> &str {
        &self.supers[s.0]
    }

    /// Per-super predicate counts keyed by name, for reports.
    pub fn group_summary(&self) -> BTreeMap<String, usize> {
        self.supers
            .iter()
            .cloned()
            .zip(self.group_sizes())
            .collect()
    }
}
