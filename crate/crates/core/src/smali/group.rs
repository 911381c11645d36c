use serde::{Deserialize, Serialize};

use super::SmaliClass;

/// A source-level method and the compiler-generated methods lowered out of
/// it. Indices point into `SmaliClass::methods`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodGroup {
    pub anchor: usize,
    pub companions: Vec<usize>,
}

impl MethodGroup {
    pub fn len(&self) -> usize {
        1 + self.companions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor).chain(self.companions.iter().copied())
    }
}

/// The anchor method name embedded in a synthetic method name, if any.
///
/// `lambda$onCreate$0` and `onCreate$lambda$2$lambda$1` both point at
/// `onCreate`; `-$$Nest$mrun` points at `run`; `access$getFoo` at `getFoo`.
pub fn anchor_candidate(name: &str) -> Option<&str> {
    if let Some(rest) = name.strip_prefix("lambda$") {
        return rest.split('$').next().filter(|s| !s.is_empty());
    }
    if let Some(idx) = name.find("$lambda$") {
        return Some(&name[..idx]).filter(|s| !s.is_empty());
    }
    if let Some(rest) = name.strip_prefix("-$$Nest$") {
        // R8 prefixes the member kind: m (method), fget/fput (field).
        return rest.strip_prefix('m').filter(|s| !s.is_empty());
    }
    if let Some(rest) = name.strip_prefix("access$") {
        return Some(rest).filter(|s| !s.is_empty() && !s.bytes().all(|b| b.is_ascii_digit()));
    }
    None
}

/// Partitions the methods of `class` into anchor groups, in anchor order.
///
/// Synthetic methods attach to the first non-synthetic method whose name
/// their own name embeds; unmatched synthetics form singleton groups.
pub fn group_synthetic_methods(class: &SmaliClass) -> Vec<MethodGroup> {
    let methods = &class.methods;
    let mut owner: Vec<usize> = (0..methods.len()).collect();
    for (i, m) in methods.iter().enumerate() {
        if !m.is_synthetic {
            continue;
        }
        if let Some(anchor) = anchor_candidate(&m.name) {
            if let Some(j) = methods
                .iter()
                .position(|other| !other.is_synthetic && other.name == anchor)
            {
                owner[i] = j;
            }
        }
    }

    let mut groups: Vec<MethodGroup> = Vec::new();
    for i in 0..methods.len() {
        if owner[i] == i {
            groups.push(MethodGroup {
                anchor: i,
                companions: Vec::new(),
            });
        }
    }
    for (i, &o) in owner.iter().enumerate() {
        if o != i {
            let group = groups
                .iter_mut()
                .find(|g| g.anchor == o)
                .expect("anchors are non-synthetic and own themselves");
            group.companions.push(i);
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smali::parse_smali_file;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn class_of(names: &[(&str, &str)]) -> SmaliClass {
        let mut text = String::from(".class public Lx/Y;\n");
        for (mods, name) in names {
            text.push_str(&format!(".method {mods} {name}()V\n.end method\n"));
        }
        parse_smali_file(&text, "Y.smali").unwrap()
    }

    #[test]
    fn no_synthetics_is_identity_partition() {
        let class = class_of(&[("public", "a"), ("public", "b"), ("private", "c")]);
        let groups = group_synthetic_methods(&class);
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn lambdas_attach_to_anchor() {
        let class = class_of(&[
            ("public", "onCreateView"),
            ("private static final", "onCreateView$lambda$0"),
            ("private static final", "onCreateView$lambda$1"),
            ("static synthetic", "onCreateView$lambda$2"),
            ("static synthetic", "onCreateView$lambda$3"),
        ]);
        let groups = group_synthetic_methods(&class);
        assert_eq!(groups, vec![MethodGroup { anchor: 0, companions: vec![1, 2, 3, 4] }]);
    }

    #[test]
    fn orphan_lambda_is_singleton() {
        let class = class_of(&[("private static synthetic", "lambda$orphan$0"), ("public", "run")]);
        let groups = group_synthetic_methods(&class);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].anchor, 0);
        assert!(groups[0].companions.is_empty());
    }

    #[test]
    fn anchor_candidates() {
        assert_eq!(anchor_candidate("lambda$start$3"), Some("start"));
        assert_eq!(anchor_candidate("onCreateView$lambda$2$lambda$1"), Some("onCreateView"));
        assert_eq!(anchor_candidate("-$$Nest$msend"), Some("send"));
        assert_eq!(anchor_candidate("-$$Nest$fgetx"), None);
        assert_eq!(anchor_candidate("access$000"), None);
        assert_eq!(anchor_candidate("access$upload"), Some("upload"));
        assert_eq!(anchor_candidate("run"), None);
    }

    proptest! {
        #[test]
        fn groups_partition_methods(
            names in prop::collection::vec(
                prop::sample::select(vec![
                    "a", "b", "run", "lambda$a$0", "lambda$run$1", "b$lambda$0",
                    "lambda$zzz$0", "access$a", "-$$Nest$mb", "access$000",
                ]),
                0..12,
            )
        ) {
            let owned: Vec<(&str, &str)> = names.iter().map(|n| ("public", *n)).collect();
            let class = class_of(&owned);
            let groups = group_synthetic_methods(&class);
            let mut seen = BTreeSet::new();
            for g in &groups {
                prop_assert!(!class.methods[g.anchor].is_synthetic || g.companions.is_empty());
                for i in g.members() {
                    prop_assert!(seen.insert(i), "method {} in two groups", i);
                }
            }
            prop_assert_eq!(seen.len(), class.methods.len());
        }
    }
}
