//! Tab-separated id-pair files.
//!
//! Each data line is `id<TAB>id` with non-negative integer ids. Lines starting
//! with `#` are comments. An optional header line
//! `% users=<n> items=<n> groups=<n>` (any subset of keys, in any of the three
//! files) overrides the counts that are otherwise inferred as `max id + 1`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::sparse::SparseBinary;

#[derive(Debug, Default, Clone, Copy)]
struct Header {
    users: Option<usize>,
    items: Option<usize>,
    groups: Option<usize>,
}

impl Header {
    fn merge(&mut self, other: Header) {
        self.users = other.users.or(self.users);
        self.items = other.items.or(self.items);
        self.groups = other.groups.or(self.groups);
    }
}

struct PairFile {
    header: Header,
    /// `(line number, a, b)`
    pairs: Vec<(usize, usize, usize)>,
}

fn parse_pair_file(path: &Path) -> Result<PairFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = Header::default();
    let mut pairs = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('%') {
            for token in rest.split_whitespace() {
                let (key, value) = token
                    .split_once('=')
                    .ok_or_else(|| parse_err(lineno, format!("malformed header token `{token}`")))?;
                let n: usize = value
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad count `{value}` for `{key}`")))?;
                match key {
                    "users" => header.users = Some(n),
                    "items" => header.items = Some(n),
                    "groups" => header.groups = Some(n),
                    _ => return Err(parse_err(lineno, format!("unknown header key `{key}`"))),
                }
            }
            continue;
        }
        let mut fields = line.split('\t');
        let (a, b) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(parse_err(
                    lineno,
                    format!("expected `id<TAB>id`, got `{line}`"),
                ))
            }
        };
        let parse_id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("`{s}` is not a non-negative integer id")))
        };
        pairs.push((lineno, parse_id(a)?, parse_id(b)?));
    }
    Ok(PairFile { header, pairs })
}

fn infer(max_id: Option<usize>) -> usize {
    max_id.map_or(0, |m| m + 1)
}

/// Loads the three interaction files.
///
/// `user_item_path` holds `user<TAB>item`, `group_item_path` holds
/// `group<TAB>item` and `membership_path` holds `group<TAB>user`.
pub fn load_dataset(
    user_item_path: impl AsRef<Path>,
    group_item_path: impl AsRef<Path>,
    membership_path: impl AsRef<Path>,
) -> Result<InteractionDataset> {
    let ui_path = user_item_path.as_ref();
    let gi_path = group_item_path.as_ref();
    let mem_path = membership_path.as_ref();
    let ui = parse_pair_file(ui_path)?;
    let gi = parse_pair_file(gi_path)?;
    let mem = parse_pair_file(mem_path)?;

    let mut header = ui.header;
    header.merge(gi.header);
    header.merge(mem.header);

    let num_users = header
        .users
        .unwrap_or_else(|| infer(ui.pairs.iter().map(|p| p.1).max()));
    let num_items = header.items.unwrap_or_else(|| {
        infer(ui.pairs.iter().chain(&gi.pairs).map(|p| p.2).max())
    });
    let num_groups = header.groups.unwrap_or_else(|| {
        infer(gi.pairs.iter().chain(&mem.pairs).map(|p| p.1).max())
    });

    let check = |file: &PairFile, path: &Path, (lim_a, name_a): (usize, &str), (lim_b, name_b): (usize, &str)| {
        for &(line, a, b) in &file.pairs {
            let bad = if a >= lim_a {
                Some((name_a, a, lim_a))
            } else if b >= lim_b {
                Some((name_b, b, lim_b))
            } else {
                None
            };
            if let Some((name, id, lim)) = bad {
                return Err(Error::Validation(format!(
                    "{}:{line}: unknown {name} {id} (num_{name}s = {lim})",
                    path.display()
                )));
            }
        }
        Ok(())
    };
    check(&ui, ui_path, (num_users, "user"), (num_items, "item"))?;
    check(&gi, gi_path, (num_groups, "group"), (num_items, "item"))?;
    check(&mem, mem_path, (num_groups, "group"), (num_users, "user"))?;

    let user_item =
        SparseBinary::from_pairs(num_users, num_items, ui.pairs.iter().map(|p| (p.1, p.2)))?;
    let group_item =
        SparseBinary::from_pairs(num_groups, num_items, gi.pairs.iter().map(|p| (p.1, p.2)))?;
    let mut membership = vec![Vec::new(); num_groups];
    for &(_, g, u) in &mem.pairs {
        membership[g].push(u);
    }
    InteractionDataset::new(user_item, group_item, membership)
}

fn write_pairs(
    path: &Path,
    header: &str,
    pairs: impl Iterator<Item = (usize, usize)>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    for (a, b) in pairs {
        let _ = writeln!(out, "{a}\t{b}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the three files with a count header so that loading them back
/// reproduces the dataset exactly, including trailing ids with no entries.
pub fn save_dataset(
    ds: &InteractionDataset,
    user_item_path: impl AsRef<Path>,
    group_item_path: impl AsRef<Path>,
    membership_path: impl AsRef<Path>,
) -> Result<()> {
    let header = format!(
        "% users={} items={} groups={}\n",
        ds.num_users(),
        ds.num_items(),
        ds.num_groups()
    );
    write_pairs(user_item_path.as_ref(), &header, ds.user_item().pairs())?;
    write_pairs(group_item_path.as_ref(), &header, ds.group_item().pairs())?;
    write_pairs(
        membership_path.as_ref(),
        &header,
        ds.membership()
            .iter()
            .enumerate()
            .flat_map(|(g, ms)| ms.iter().map(move |&u| (g, u))),
    )
}

/// Internal-to-external id tables produced by [`load_dataset_compacted`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMapping {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub groups: Vec<usize>,
}

impl IdMapping {
    fn internal(table: &[usize], id: usize) -> usize {
        table.binary_search(&id).expect("id collected during compaction")
    }

    /// `kind<TAB>internal<TAB>external` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("# kind\tinternal\texternal\n");
        for (kind, table) in [("user", &self.users), ("item", &self.items), ("group", &self.groups)] {
            for (internal, external) in table.iter().enumerate() {
                let _ = writeln!(out, "{kind}\t{internal}\t{external}");
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Like [`load_dataset`], but external ids are remapped to dense 0-based ids
/// (order-preserving). Ids that appear in no line are dropped and headers are
/// ignored.
pub fn load_dataset_compacted(
    user_item_path: impl AsRef<Path>,
    group_item_path: impl AsRef<Path>,
    membership_path: impl AsRef<Path>,
) -> Result<(InteractionDataset, IdMapping)> {
    let ui = parse_pair_file(user_item_path.as_ref())?;
    let gi = parse_pair_file(group_item_path.as_ref())?;
    let mem = parse_pair_file(membership_path.as_ref())?;

    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    let mut groups = BTreeSet::new();
    for &(_, u, i) in &ui.pairs {
        users.insert(u);
        items.insert(i);
    }
    for &(_, g, i) in &gi.pairs {
        groups.insert(g);
        items.insert(i);
    }
    for &(_, g, u) in &mem.pairs {
        groups.insert(g);
        users.insert(u);
    }
    let map = IdMapping {
        users: users.into_iter().collect(),
        items: items.into_iter().collect(),
        groups: groups.into_iter().collect(),
    };
    let user_item = SparseBinary::from_pairs(
        map.users.len(),
        map.items.len(),
        ui.pairs
            .iter()
            .map(|p| (IdMapping::internal(&map.users, p.1), IdMapping::internal(&map.items, p.2))),
    )?;
    let group_item = SparseBinary::from_pairs(
        map.groups.len(),
        map.items.len(),
        gi.pairs
            .iter()
            .map(|p| (IdMapping::internal(&map.groups, p.1), IdMapping::internal(&map.items, p.2))),
    )?;
    let mut membership = vec![Vec::new(); map.groups.len()];
    for &(_, g, u) in &mem.pairs {
        membership[IdMapping::internal(&map.groups, g)].push(IdMapping::internal(&map.users, u));
    }
    Ok((InteractionDataset::new(user_item, group_item, membership)?, map))
}
