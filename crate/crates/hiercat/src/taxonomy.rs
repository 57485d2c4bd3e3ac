//! The five-level category tree: gender, family, category, sub-category,
//! and attributes.
//!
//! The top four levels form strict single-parent chains, so knowing a
//! sub-category determines its category, family, and gender. Attributes sit
//! outside the chain: one attribute may attach to several categories, and
//! there is no edge between sub-categories and attributes. Only category,
//! sub-category, and attributes are ever predicted; gender and family are
//! inferred here.
//!
//! A tree is plain data and may be structurally broken (that is what
//! [`CategoryTree::validate`] reports); inference operations return errors
//! when asked to walk broken or unknown chains.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Gender,
    Family,
    Category,
    SubCategory,
    Attribute,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Gender => "gender",
            Level::Family => "family",
            Level::Category => "category",
            Level::SubCategory => "sub-category",
            Level::Attribute => "attribute",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        Some(match s {
            "gender" => Level::Gender,
            "family" => Level::Family,
            "category" => Level::Category,
            "sub-category" => Level::SubCategory,
            "attribute" => Level::Attribute,
            _ => None?,
        })
    }

    /// The level a node's parent must live at; `None` for roots and for
    /// attributes (whose links are attachments, not parents).
    fn parent_level(self) -> Option<Level> {
        match self {
            Level::Gender => None,
            Level::Family => Some(Level::Gender),
            Level::Category => Some(Level::Family),
            Level::SubCategory => Some(Level::Category),
            Level::Attribute => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One tree node. `links` holds the parent id(s) for gender/family/category/
/// sub-category rows (a well-formed node has exactly one, which
/// [`CategoryTree::validate`] enforces) and the attached category ids for
/// attribute rows.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: u32,
    pub name: String,
    pub level: Level,
    pub links: Vec<u32>,
}

/// The taxonomy. Node order is insertion order, which fixes the class index
/// of every category, sub-category, and attribute.
#[derive(Debug, Clone, Default)]
pub struct CategoryTree {
    nodes: Vec<Node>,
    by_id: BTreeMap<u32, usize>,
}

impl CategoryTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node; ids must be unique across all levels.
    pub fn add_node(&mut self, level: Level, id: u32, name: &str, links: &[u32]) -> Result<()> {
        if self.by_id.contains_key(&id) {
            return Err(Error::Data(format!("duplicate node id {id} ({name})")));
        }
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Data(format!(
                "node {id}: name must be non-empty without tabs or newlines"
            )));
        }
        self.by_id.insert(id, self.nodes.len());
        self.nodes.push(Node {
            id,
            name: name.to_string(),
            level,
            links: links.to_vec(),
        });
        Ok(())
    }

    pub fn gender(&mut self, id: u32, name: &str) -> Result<()> {
        self.add_node(Level::Gender, id, name, &[])
    }

    pub fn family(&mut self, id: u32, name: &str, parent: u32) -> Result<()> {
        self.add_node(Level::Family, id, name, &[parent])
    }

    pub fn category(&mut self, id: u32, name: &str, parent: u32) -> Result<()> {
        self.add_node(Level::Category, id, name, &[parent])
    }

    pub fn sub_category(&mut self, id: u32, name: &str, parent: u32) -> Result<()> {
        self.add_node(Level::SubCategory, id, name, &[parent])
    }

    pub fn attribute(&mut self, id: u32, name: &str, categories: &[u32]) -> Result<()> {
        self.add_node(Level::Attribute, id, name, categories)
    }

    pub fn node(&self, id: u32) -> Option<&Node> {
        self.by_id.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Ids of one level in insertion order; this order is the class-index
    /// mapping used by models and labels.
    pub fn level_ids(&self, level: Level) -> Vec<u32> {
        self.nodes
            .iter()
            .filter(|n| n.level == level)
            .map(|n| n.id)
            .collect()
    }

    pub fn level_len(&self, level: Level) -> usize {
        self.nodes.iter().filter(|n| n.level == level).count()
    }

    fn require(&self, id: u32, what: &str) -> Result<&Node> {
        self.node(id)
            .ok_or_else(|| Error::Data(format!("unknown {what} id {id}")))
    }

    fn parent_of(&self, node: &Node) -> Result<&Node> {
        let expected = node
            .level
            .parent_level()
            .unwrap_or_else(|| panic!("{} nodes have no parent chain", node.level));
        if node.links.len() != 1 {
            return Err(Error::Data(format!(
                "{} {} ({}) has {} parents, expected exactly one",
                node.level,
                node.id,
                node.name,
                node.links.len()
            )));
        }
        let parent = self.require(node.links[0], "parent")?;
        if parent.level != expected {
            return Err(Error::Data(format!(
                "{} {} ({}) has parent {} at level {}, expected {expected}",
                node.level, node.id, node.name, parent.id, parent.level
            )));
        }
        Ok(parent)
    }

    /// Walks the chain sub-category -> category -> family -> gender.
    pub fn infer_ancestors(&self, sub_category_id: u32) -> Result<(u32, u32, u32)> {
        let sub = self.require(sub_category_id, "sub-category")?;
        if sub.level != Level::SubCategory {
            return Err(Error::Data(format!(
                "node {sub_category_id} ({}) is a {}, not a sub-category",
                sub.name, sub.level
            )));
        }
        let category = self.parent_of(sub)?;
        let family = self.parent_of(category)?;
        let gender = self.parent_of(family)?;
        Ok((category.id, family.id, gender.id))
    }

    /// Walks the chain category -> family -> gender, for ancestor inference
    /// from a predicted category.
    pub fn category_ancestors(&self, category_id: u32) -> Result<(u32, u32)> {
        let category = self.require(category_id, "category")?;
        if category.level != Level::Category {
            return Err(Error::Data(format!(
                "node {category_id} ({}) is a {}, not a category",
                category.name, category.level
            )));
        }
        let family = self.parent_of(category)?;
        let gender = self.parent_of(family)?;
        Ok((family.id, gender.id))
    }

    /// Checks every structural invariant; an empty list means the tree is
    /// well formed. Violations are data to report, not faults.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        for node in &self.nodes {
            let describe = format!("{} {} ({})", node.level, node.id, node.name);
            match node.level {
                Level::Gender => {
                    if !node.links.is_empty() {
                        violations.push(format!("{describe}: gender nodes take no parent"));
                    }
                }
                Level::Family | Level::Category | Level::SubCategory => {
                    let expected = node.level.parent_level().unwrap();
                    if node.links.is_empty() {
                        violations.push(format!("{describe}: missing parent"));
                    } else if node.links.len() > 1 {
                        violations.push(format!(
                            "{describe}: multiple parents {:?}",
                            node.links
                        ));
                    }
                    for &p in &node.links {
                        match self.node(p) {
                            None => violations.push(format!("{describe}: unknown parent {p}")),
                            Some(parent) if parent.level != expected => violations.push(format!(
                                "{describe}: parent {p} is a {}, expected a {expected}",
                                parent.level
                            )),
                            Some(_) => {}
                        }
                    }
                }
                Level::Attribute => {
                    if node.links.is_empty() {
                        violations.push(format!("{describe}: no attached categories"));
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    for &c in &node.links {
                        if !seen.insert(c) {
                            violations.push(format!("{describe}: duplicate attachment {c}"));
                        }
                        match self.node(c) {
                            None => {
                                violations.push(format!("{describe}: unknown attachment {c}"))
                            }
                            Some(target) if target.level != Level::Category => violations.push(
                                format!(
                                    "{describe}: attachment {c} is a {}, expected a category",
                                    target.level
                                ),
                            ),
                            Some(_) => {}
                        }
                    }
                }
            }
        }
        violations
    }

    /// True iff the sub-category's parent is `category_id` and every
    /// attribute attaches to it. The second return lists offending
    /// (category, node) pairs.
    pub fn is_consistent(
        &self,
        category_id: u32,
        sub_category_id: u32,
        attribute_ids: &[u32],
    ) -> Result<(bool, Vec<(u32, u32)>)> {
        let category = self.require(category_id, "category")?;
        if category.level != Level::Category {
            return Err(Error::Data(format!(
                "node {category_id} ({}) is a {}, not a category",
                category.name, category.level
            )));
        }
        let sub = self.require(sub_category_id, "sub-category")?;
        if sub.level != Level::SubCategory {
            return Err(Error::Data(format!(
                "node {sub_category_id} ({}) is a {}, not a sub-category",
                sub.name, sub.level
            )));
        }
        let mut pairs = Vec::new();
        if self.parent_of(sub)?.id != category_id {
            pairs.push((category_id, sub_category_id));
        }
        for &a in attribute_ids {
            let attr = self.require(a, "attribute")?;
            if attr.level != Level::Attribute {
                return Err(Error::Data(format!(
                    "node {a} ({}) is a {}, not an attribute",
                    attr.name, attr.level
                )));
            }
            if !attr.links.contains(&category_id) {
                pairs.push((category_id, a));
            }
        }
        Ok((pairs.is_empty(), pairs))
    }

    /// Writes the line-oriented tree file:
    /// `level<TAB>id<TAB>name<TAB>parent-or-attachments`, attachments
    /// comma-separated, `-` when a node has no links.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for node in &self.nodes {
            let links = if node.links.is_empty() {
                "-".to_string()
            } else {
                node.links
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                node.level, node.id, node.name, links
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a tree file; blank lines and `#` comments are ignored.
    /// Duplicate ids are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |line_no: usize, msg: String| {
            Error::Format(format!("tree {}:{line_no}: {msg}", path.display()))
        };
        let mut tree = CategoryTree::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(
                    line_no,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            }
            let level = Level::parse(fields[0])
                .ok_or_else(|| bad(line_no, format!("unknown level {:?}", fields[0])))?;
            let id: u32 = fields[1]
                .parse()
                .map_err(|_| bad(line_no, format!("bad id {:?}", fields[1])))?;
            let links: Vec<u32> = if fields[3] == "-" {
                Vec::new()
            } else {
                fields[3]
                    .split(',')
                    .map(|l| {
                        l.parse::<u32>()
                            .map_err(|_| bad(line_no, format!("bad link {l:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            tree.add_node(level, id, fields[2], &links)
                .map_err(|e| bad(line_no, e.to_string()))?;
        }
        Ok(tree)
    }
}
