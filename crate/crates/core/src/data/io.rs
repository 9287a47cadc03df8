//! Text file formats. See `docs/formats.md` for the exact layouts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MultimodalKG, TextAttribute, Triple, VisualAttribute};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense string interning. Ids follow first appearance. A frozen interner
/// rejects names it has not seen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut interner = Interner::new();
        for name in names {
            if interner.index.contains_key(&name) {
                return Err(Error::Format(format!("duplicate name `{name}`")));
            }
            interner.intern(&name)?;
        }
        interner.frozen = true;
        Ok(interner)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn intern(&mut self, name: &str) -> Result<usize> {
        if let Some(&id) = self.index.get(name) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::Lookup {
                kind: "name",
                name: name.to_string(),
            });
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn into_names(self) -> Vec<String> {
        self.names
    }
}

/// Reads `head<TAB>relation<TAB>tail` lines, interning names in order of
/// first appearance. Duplicate lines are kept.
pub fn load_triples(path: &Path) -> Result<(Vec<Triple>, Interner, Interner)> {
    let mut entities = Interner::new();
    let mut relations = Interner::new();
    let triples = load_triples_with(path, &mut entities, &mut relations)?;
    Ok((triples, entities, relations))
}

/// Like [`load_triples`] but interns into existing maps. Frozen maps turn
/// unknown names into lookup errors.
pub fn load_triples_with(path: &Path, entities: &mut Interner, relations: &mut Interner) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path)?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(path, i + 1, "expected `head<TAB>relation<TAB>tail`"));
        }
        let lookup = |e: Error, kind: &'static str| match e {
            Error::Lookup { name, .. } => Error::Lookup { kind, name },
            other => other,
        };
        let head = entities.intern(fields[0]).map_err(|e| lookup(e, "entity"))?;
        let relation = relations.intern(fields[1]).map_err(|e| lookup(e, "relation"))?;
        let tail = entities.intern(fields[2]).map_err(|e| lookup(e, "entity"))?;
        triples.push(Triple::new(head, relation, tail));
    }
    Ok(triples)
}

pub fn write_triples(path: &Path, triples: &[Triple], entities: &[String], relations: &[String]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        writeln!(out, "{}\t{}\t{}", entities[t.head.0], relations[t.relation.0], entities[t.tail.0]).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads `entity<TAB>free text` lines. Entities without a line get an empty
/// (missing) description.
pub fn load_descriptions(path: &Path, entities: &Interner) -> Result<Vec<TextAttribute>> {
    let text = fs::read_to_string(path)?;
    let mut out = vec![TextAttribute::default(); entities.len()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, desc) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `entity<TAB>text`"))?;
        let id = entities.get(name).ok_or_else(|| Error::Lookup {
            kind: "entity",
            name: name.to_string(),
        })?;
        out[id] = TextAttribute::from_text(desc);
    }
    Ok(out)
}

fn write_descriptions(path: &Path, mkg: &MultimodalKG) -> Result<()> {
    let mut out = String::new();
    for (name, attr) in mkg.entity_names.iter().zip(&mkg.text) {
        if !attr.is_missing() {
            writeln!(out, "{name}\t{}", attr.words.join(" ")).unwrap();
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes visual features as text blocks:
///
/// ```text
/// <entity>\t<num_images> <P> <D_in>
/// <D_in floats>      # repeated num_images * P times, image-major then patch
/// ```
///
/// Floats use Rust's shortest round-trip formatting so reading them back is
/// bit-exact. Entities with a missing visual attribute are omitted.
pub fn write_visual_features(path: &Path, names: &[String], visual: &[VisualAttribute]) -> Result<()> {
    let mut out = String::new();
    for (name, attr) in names.iter().zip(visual) {
        let VisualAttribute::Images(images) = attr else { continue };
        let (p, d) = (images[0].rows(), images[0].cols());
        writeln!(out, "{name}\t{} {p} {d}", images.len()).unwrap();
        for image in images {
            for r in 0..p {
                let row: Vec<String> = image.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the format written by [`write_visual_features`]. Entities absent
/// from the file get [`VisualAttribute::Missing`].
pub fn read_visual_features(path: &Path, entities: &Interner) -> Result<Vec<VisualAttribute>> {
    let text = fs::read_to_string(path)?;
    let mut out = vec![VisualAttribute::Missing; entities.len()];
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut shape: Option<(usize, usize)> = None;
    while let Some((i, header)) = lines.next() {
        let (name, dims) = header
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `entity<TAB>num_images P D_in`"))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| Error::parse(path, i + 1, "bad header integer")))
            .collect::<Result<_>>()?;
        let [count, p, d] = dims[..] else {
            return Err(Error::parse(path, i + 1, "header needs three integers"));
        };
        if count == 0 || p == 0 || d == 0 {
            return Err(Error::parse(path, i + 1, "header dimensions must be positive"));
        }
        match shape {
            Some(s) if s != (p, d) => return Err(Error::parse(path, i + 1, "patch shape differs from earlier entities")),
            _ => shape = Some((p, d)),
        }
        let id = entities.get(name).ok_or_else(|| Error::Lookup {
            kind: "entity",
            name: name.to_string(),
        })?;
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = Vec::with_capacity(p * d);
            for _ in 0..p {
                let (j, row) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, i + 1, "truncated feature block"))?;
                let before = data.len();
                for v in row.split_whitespace() {
                    data.push(v.parse::<f64>().map_err(|_| Error::parse(path, j + 1, "bad float"))?);
                }
                if data.len() - before != d {
                    return Err(Error::parse(path, j + 1, format!("expected {d} values")));
                }
            }
            images.push(Tensor::from_matrix(p, d, data)?);
        }
        out[id] = VisualAttribute::Images(images);
    }
    Ok(out)
}

const ENTITIES_FILE: &str = "entities.txt";
const RELATIONS_FILE: &str = "relations.txt";

fn read_names(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn save_dataset(dir: &Path, mkg: &MultimodalKG) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ENTITIES_FILE), mkg.entity_names.join("\n") + "\n")?;
    fs::write(dir.join(RELATIONS_FILE), mkg.relation_names.join("\n") + "\n")?;
    write_triples(&dir.join("train.tsv"), &mkg.train, &mkg.entity_names, &mkg.relation_names)?;
    write_triples(&dir.join("dev.tsv"), &mkg.dev, &mkg.entity_names, &mkg.relation_names)?;
    write_triples(&dir.join("test.tsv"), &mkg.test, &mkg.entity_names, &mkg.relation_names)?;
    write_descriptions(&dir.join("descriptions.tsv"), mkg)?;
    write_visual_features(&dir.join("visual.txt"), &mkg.entity_names, &mkg.visual)?;
    Ok([
        ENTITIES_FILE,
        RELATIONS_FILE,
        "train.tsv",
        "dev.tsv",
        "test.tsv",
        "descriptions.tsv",
        "visual.txt",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect())
}

/// Loads `train.tsv`, `dev.tsv`, `test.tsv` and the optional
/// `descriptions.tsv` / `visual.txt` from `dir`.
///
/// When `entities.txt` and `relations.txt` exist they fix the id maps;
/// otherwise ids are assigned by first appearance in the training split and
/// dev/test may only mention known names.
pub fn load_dataset(dir: &Path) -> Result<MultimodalKG> {
    let (mut entities, mut relations) = if dir.join(ENTITIES_FILE).exists() && dir.join(RELATIONS_FILE).exists() {
        (
            Interner::from_names(read_names(&dir.join(ENTITIES_FILE))?)?,
            Interner::from_names(read_names(&dir.join(RELATIONS_FILE))?)?,
        )
    } else {
        (Interner::new(), Interner::new())
    };
    let train = load_triples_with(&dir.join("train.tsv"), &mut entities, &mut relations)?;
    entities.freeze();
    relations.freeze();
    let optional_split = |name: &str, e: &mut Interner, r: &mut Interner| -> Result<Vec<Triple>> {
        let path = dir.join(name);
        if path.exists() {
            load_triples_with(&path, e, r)
        } else {
            Ok(Vec::new())
        }
    };
    let dev = optional_split("dev.tsv", &mut entities, &mut relations)?;
    let test = optional_split("test.tsv", &mut entities, &mut relations)?;

    let desc_path = dir.join("descriptions.tsv");
    let text = if desc_path.exists() {
        load_descriptions(&desc_path, &entities)?
    } else {
        vec![TextAttribute::default(); entities.len()]
    };
    let vis_path = dir.join("visual.txt");
    let visual = if vis_path.exists() {
        read_visual_features(&vis_path, &entities)?
    } else {
        vec![VisualAttribute::Missing; entities.len()]
    };
    let mkg = MultimodalKG {
        entity_names: entities.into_names(),
        relation_names: relations.into_names(),
        train,
        dev,
        test,
        text,
        visual,
    };
    mkg.validate()?;
    Ok(mkg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn empty_file_gives_no_triples() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.tsv", "");
        let (triples, ents, rels) = load_triples(&path).unwrap();
        assert!(triples.is_empty());
        assert_eq!(ents.len(), 0);
        assert_eq!(rels.len(), 0);
    }

    #[test]
    fn three_lines_four_entities_two_relations() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.tsv", "a\tr1\tb\nb\tr2\tc\nd\tr1\ta\n");
        let (triples, ents, rels) = load_triples(&path).unwrap();
        assert_eq!(triples.len(), 3);
        assert_eq!(ents.len(), 4);
        assert_eq!(rels.len(), 2);
        // first-appearance order: a=0, b=1, c=2, d=3
        assert_eq!(triples[2], Triple::new(3, 0, 0));
    }

    #[test]
    fn duplicate_lines_are_retained() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.tsv", "a\tr\tb\na\tr\tb\n");
        let (triples, _, _) = load_triples(&path).unwrap();
        assert_eq!(triples.len(), 2);
        assert_eq!(triples[0], triples[1]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.tsv", "a\tr\tb\nonly two\tfields\n");
        match load_triples(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_entity_against_fixed_map_is_a_lookup_error() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "train.tsv", "a\tr\tb\n");
        let test = write(dir.path(), "test.tsv", "a\tr\tzzz\n");
        let (_, mut ents, mut rels) = load_triples(&train).unwrap();
        ents.freeze();
        rels.freeze();
        match load_triples_with(&test, &mut ents, &mut rels) {
            Err(Error::Lookup { kind, name }) => {
                assert_eq!(kind, "entity");
                assert_eq!(name, "zzz");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn visual_features_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let img = |s: f64| Tensor::from_matrix(2, 3, vec![s, -s / 3.0, 1e-300, 0.1, s * 1e17, -0.0]).unwrap();
        let visual = vec![
            VisualAttribute::Images(vec![img(1.0), img(std::f64::consts::PI)]),
            VisualAttribute::Missing,
            VisualAttribute::Images(vec![img(-2.5)]),
        ];
        let path = dir.path().join("visual.txt");
        write_visual_features(&path, &names, &visual).unwrap();
        let interner = Interner::from_names(names).unwrap();
        let back = read_visual_features(&path, &interner).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in visual.iter().zip(&back) {
            match (a, b) {
                (VisualAttribute::Images(x), VisualAttribute::Images(y)) => {
                    assert_eq!(x.len(), y.len());
                    for (m, n) in x.iter().zip(y) {
                        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                        assert_eq!(bits(m), bits(n));
                    }
                }
                (VisualAttribute::Missing, VisualAttribute::Missing) => {}
                _ => panic!("attribute kind changed"),
            }
        }
    }

    #[test]
    fn inconsistent_patch_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "visual.txt", "a\t1 1 2\n1 2\nb\t1 1 3\n1 2 3\n");
        let interner = Interner::from_names(vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(read_visual_features(&path, &interner), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn descriptions_default_to_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "d.tsv", "b\tred   city\n");
        let interner = Interner::from_names(vec!["a".into(), "b".into()]).unwrap();
        let text = load_descriptions(&path, &interner).unwrap();
        assert!(text[0].is_missing());
        assert_eq!(text[1].words, vec!["red", "city"]);
    }
}
