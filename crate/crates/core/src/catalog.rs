//! Platform catalog: canonical platforms with their category, plus web/app
//! alias pairs that name the same platform.
//!
//! CSV layout (header required): `identifier,category,alias_of`. A row with
//! an empty `alias_of` declares a canonical platform and must carry a
//! category; a row with `alias_of` declares one alias pair and may leave the
//! category empty.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::profile::Category;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("alias class of `{0}` has no canonical platform")]
    Orphan(String),
    #[error("alias pairs join canonical platforms `{0}` and `{1}`")]
    Conflict(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Number of canonical platforms per category in the built-in catalog.
pub const SYNTHETIC_SIZES: [usize; 6] = [475, 357, 265, 127, 39, 34];

#[derive(Debug, Clone, Default)]
pub struct ResourceCatalog {
    category: HashMap<Arc<str>, Category>,
    canonical: HashMap<Arc<str>, Arc<str>>,
    platforms: Vec<(Arc<str>, Category)>,
    pairs: Vec<(Arc<str>, Arc<str>)>,
}

impl ResourceCatalog {
    pub fn new(
        platforms: Vec<(String, Category)>,
        alias_pairs: Vec<(String, String)>,
    ) -> Result<Self, CatalogError> {
        let mut ids: Vec<Arc<str>> = Vec::new();
        let mut index: HashMap<Arc<str>, usize> = HashMap::new();
        let mut intern = |s: &str, ids: &mut Vec<Arc<str>>| -> usize {
            if let Some(&i) = index.get(s) {
                return i;
            }
            let a: Arc<str> = Arc::from(s);
            index.insert(a.clone(), ids.len());
            ids.push(a);
            ids.len() - 1
        };
        let mut canon_of_node: Vec<Option<Category>> = Vec::new();
        let mut plats = Vec::new();
        for (p, c) in &platforms {
            let i = intern(p, &mut ids);
            canon_of_node.resize(ids.len(), None);
            canon_of_node[i] = Some(*c);
            plats.push((ids[i].clone(), *c));
        }
        let mut edges = Vec::new();
        for (a, b) in &alias_pairs {
            let i = intern(a, &mut ids);
            let j = intern(b, &mut ids);
            edges.push((i, j));
        }
        canon_of_node.resize(ids.len(), None);

        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(i, j) in &edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
            }
        }
        let mut root_canon: HashMap<usize, usize> = HashMap::new();
        for (i, c) in canon_of_node.iter().enumerate() {
            if c.is_some() {
                let r = find(&mut parent, i);
                if let Some(&other) = root_canon.get(&r) {
                    return Err(CatalogError::Conflict(ids[other].to_string(), ids[i].to_string()));
                }
                root_canon.insert(r, i);
            }
        }
        let mut canonical = HashMap::new();
        let mut category = HashMap::new();
        for i in 0..ids.len() {
            let r = find(&mut parent, i);
            let c = *root_canon
                .get(&r)
                .ok_or_else(|| CatalogError::Orphan(ids[i].to_string()))?;
            canonical.insert(ids[i].clone(), ids[c].clone());
            if let Some(cat) = canon_of_node[i] {
                category.insert(ids[i].clone(), cat);
            }
        }
        let pairs = edges.iter().map(|&(i, j)| (ids[i].clone(), ids[j].clone())).collect();
        Ok(Self {
            category,
            canonical,
            platforms: plats,
            pairs,
        })
    }

    /// Built-in catalog of 1'297 canonical platforms and 576 alias pairs
    /// spanning 1'839 distinct identifiers. 474 platforms carry one app
    /// alias; 34 carry a mobile-web and an app alias linked pairwise.
    pub fn synthetic() -> Self {
        let mut platforms = Vec::new();
        for (cat, &n) in Category::ALL.iter().zip(SYNTHETIC_SIZES.iter()) {
            for i in 0..n {
                platforms.push((format!("{}{:03}.com", slug(*cat), i), *cat));
            }
        }
        let total = platforms.len();
        let mut pairs = Vec::new();
        let mut j = 0;
        for (g, (name, _)) in platforms.iter().enumerate() {
            // spread 508 aliased platforms evenly over the catalog
            if (g + 1) * 508 / total == g * 508 / total {
                continue;
            }
            let stem = name.trim_end_matches(".com");
            let app = format!("com.{}.app", stem);
            pairs.push((app.clone(), name.clone()));
            if j % 15 == 0 && j / 15 < 34 {
                let mobile = format!("m.{}", name);
                pairs.push((mobile.clone(), name.clone()));
                pairs.push((app, mobile));
            }
            j += 1;
        }
        Self::new(platforms, pairs).expect("built-in catalog is consistent")
    }

    /// Canonical platform for `id`, or `id` itself when unknown.
    pub fn canonical(&self, id: &str) -> Option<&Arc<str>> {
        self.canonical.get(id)
    }

    pub fn category_of(&self, id: &str) -> Category {
        self.canonical
            .get(id)
            .and_then(|c| self.category.get(c))
            .copied()
            .unwrap_or(Category::Other)
    }

    pub fn platforms(&self) -> &[(Arc<str>, Category)] {
        &self.platforms
    }

    pub fn alias_pairs(&self) -> &[(Arc<str>, Arc<str>)] {
        &self.pairs
    }

    /// Every identifier that resolves to `canonical`, including itself.
    pub fn identifiers_of(&self, canonical: &str) -> Vec<Arc<str>> {
        let mut out: Vec<Arc<str>> = self
            .canonical
            .iter()
            .filter(|(_, c)| c.as_ref() == canonical)
            .map(|(k, _)| k.clone())
            .collect();
        out.sort();
        out
    }

    /// All known identifiers (canonical and alias).
    pub fn identifier_count(&self) -> usize {
        self.canonical.len()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CatalogError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let want = ["identifier", "category", "alias_of"];
        if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| h.trim() != w) {
            return Err(CatalogError::Parse {
                line: 1,
                msg: format!("expected header `{}`", want.join(",")),
            });
        }
        let mut platforms = Vec::new();
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |msg: String| CatalogError::Parse { line, msg };
            if rec.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", rec.len())));
            }
            let id = rec[0].trim();
            if id.is_empty() {
                return Err(err("empty identifier".into()));
            }
            let alias_of = rec[2].trim();
            if alias_of.is_empty() {
                let cat: Category = rec[1].trim().parse().map_err(err)?;
                platforms.push((id.to_string(), cat));
            } else {
                pairs.push((id.to_string(), alias_of.to_string()));
            }
        }
        Self::new(platforms, pairs)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CatalogError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["identifier", "category", "alias_of"])?;
        for (p, c) in &self.platforms {
            w.write_record([p.as_ref(), c.label(), ""])?;
        }
        for (a, b) in &self.pairs {
            w.write_record([a.as_ref(), "", b.as_ref()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn slug(c: Category) -> &'static str {
    match c {
        Category::Services => "svc",
        Category::Social => "social",
        Category::Commerce => "shop",
        Category::MoneyTransfer => "pay",
        Category::Crypto => "coin",
        Category::Other => "misc",
    }
}

/// Map identifiers to canonical platforms and drop repeats, keeping the
/// first occurrence order. Unknown identifiers pass through unchanged.
pub fn collapse_aliases<S: AsRef<str>>(identifiers: &[S], catalog: &ResourceCatalog) -> Vec<Arc<str>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in identifiers {
        let id = id.as_ref();
        let c = catalog.canonical(id).cloned().unwrap_or_else(|| Arc::from(id));
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ResourceCatalog {
        let platforms: Vec<(String, Category)> = (0..6)
            .map(|i| (format!("p{i}"), Category::ALL[i % 6]))
            .collect();
        // 10 identifiers, 4 alias pairs -> 6 canonical
        let pairs = vec![
            ("a0".to_string(), "p0".to_string()),
            ("a1".to_string(), "p1".to_string()),
            ("a2".to_string(), "p2".to_string()),
            ("a3".to_string(), "p3".to_string()),
        ];
        ResourceCatalog::new(platforms, pairs).unwrap()
    }

    #[test]
    fn toy_catalog_collapses_to_six() {
        let cat = toy();
        let ids = ["p0", "a0", "p1", "a1", "p2", "a2", "p3", "a3", "p4", "p5"];
        assert_eq!(cat.identifier_count(), 10);
        let out = collapse_aliases(&ids, &cat);
        assert_eq!(out.len(), 6);
        assert_eq!(out[0].as_ref(), "p0");
    }

    #[test]
    fn empty_and_unknown() {
        let cat = toy();
        let empty: [&str; 0] = [];
        assert!(collapse_aliases(&empty, &cat).is_empty());
        let out = collapse_aliases(&["zz", "a0", "zz"], &cat);
        assert_eq!(out.iter().map(|s| s.as_ref()).collect::<Vec<_>>(), ["zz", "p0"]);
        assert_eq!(cat.category_of("zz"), Category::Other);
        assert_eq!(cat.category_of("a1"), Category::Social);
    }

    #[test]
    fn synthetic_catalog_shape() {
        let cat = ResourceCatalog::synthetic();
        assert_eq!(cat.platforms().len(), 1297);
        assert_eq!(cat.alias_pairs().len(), 576);
        assert_eq!(cat.identifier_count(), 1839);
        let all: Vec<Arc<str>> = cat.canonical.keys().cloned().collect();
        assert_eq!(collapse_aliases(&all, &cat).len(), 1297);
    }

    #[test]
    fn csv_round_trip() {
        let cat = ResourceCatalog::synthetic();
        let mut buf = Vec::new();
        cat.write_csv(&mut buf).unwrap();
        let back = ResourceCatalog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.platforms(), cat.platforms());
        assert_eq!(back.identifier_count(), 1839);
    }

    #[test]
    fn csv_errors_carry_line() {
        let text = "identifier,category,alias_of\np0,Services,\np1,Bogus,\n";
        match ResourceCatalog::read_csv(text.as_bytes()) {
            Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let orphan = "identifier,category,alias_of\nx,,y\n";
        assert!(matches!(ResourceCatalog::read_csv(orphan.as_bytes()), Err(CatalogError::Orphan(_))));
        let clash = "identifier,category,alias_of\na,Social,\nb,Social,\na,,b\n";
        assert!(matches!(ResourceCatalog::read_csv(clash.as_bytes()), Err(CatalogError::Conflict(..))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn collapse_is_idempotent(picks in prop::collection::vec(0usize..1900, 0..60)) {
                let cat = ResourceCatalog::synthetic();
                let mut names: Vec<Arc<str>> = cat.canonical.keys().cloned().collect();
                names.sort();
                let ids: Vec<Arc<str>> = picks
                    .iter()
                    .map(|&i| names.get(i).cloned().unwrap_or_else(|| Arc::from(format!("unknown{i}"))))
                    .collect();
                let once = collapse_aliases(&ids, &cat);
                let twice = collapse_aliases(&once, &cat);
                prop_assert!(once.len() <= ids.len());
                prop_assert_eq!(once, twice);
            }
        }
    }
}
