//! Named parameter storage grouped into the optimization sets of the link
//! objective, plus checkpoint persistence.
//!
//! A checkpoint directory holds `params.tct` (one `TCT1` record per parameter,
//! concatenated in registry order) and `manifest.txt` listing
//! `name<TAB>group<TAB>shape` for the same order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimization groups. `Theta`…`Zeta` are the text embedding (θ), token
/// encoder (α), channel encoder (β), channel decoder (γ), token decoder (δ),
/// fusion (ε) and projector (ζ); `Vision` holds the two visual tokenizers and
/// `Adapter` the low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Theta,
    Alpha,
    Beta,
    Gamma,
    Delta,
    Epsilon,
    Zeta,
    Vision,
    Adapter,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Theta,
        Group::Alpha,
        Group::Beta,
        Group::Gamma,
        Group::Delta,
        Group::Epsilon,
        Group::Zeta,
        Group::Vision,
        Group::Adapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Alpha => "alpha",
            Group::Beta => "beta",
            Group::Gamma => "gamma",
            Group::Delta => "delta",
            Group::Epsilon => "epsilon",
            Group::Zeta => "zeta",
            Group::Vision => "vision",
            Group::Adapter => "adapter",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    trainable: BTreeMap<Group, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        let mut s = Self::default();
        for g in Group::ALL {
            s.trainable.insert(g, true);
        }
        s
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, group: Group, yes: bool) {
        self.trainable.insert(group, yes);
    }

    /// Makes exactly `groups` trainable.
    pub fn train_only(&mut self, groups: &[Group]) {
        for g in Group::ALL {
            self.trainable.insert(g, groups.contains(&g));
        }
    }

    pub fn group_trainable(&self, group: Group) -> bool {
        self.trainable.get(&group).copied().unwrap_or(false)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.group_trainable(self.params[id.0].group)
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|&g| self.group_trainable(g)).collect()
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(i, _)| i).collect()
    }

    pub fn count_in(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Byte-level snapshot of one group, for frozen-group comparisons.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            out.extend(p.name.as_bytes());
            out.extend(p.value.to_tct_bytes());
        }
        out
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            p.value
                .write_tct(&mut out)
                .expect("writing to a Vec cannot fail");
        }
        out
    }

    fn manifest_text(&self) -> String {
        let mut s = String::from("# name\tgroup\tshape\n");
        for p in &self.params {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{}\t{}\t{}\n", p.name, p.group, shape.join("x")));
        }
        s
    }

    /// SHA-256 of the serialized parameter payload.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let payload = self.payload();
        let mut w = BufWriter::new(fs::File::create(dir.join("params.tct"))?);
        w.write_all(&payload)?;
        w.flush()?;
        fs::write(dir.join("manifest.txt"), self.manifest_text())?;
        Ok(hex::encode(Sha256::digest(&payload)))
    }

    /// Loads a checkpoint into a store with the same layout (names, groups
    /// and shapes must all match).
    pub fn load_into(&mut self, dir: &Path) -> Result<String> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        if manifest != self.manifest_text() {
            return Err(Error::Format(format!(
                "checkpoint manifest in {} does not match the model layout",
                dir.display()
            )));
        }
        let bytes = fs::read(dir.join("params.tct"))?;
        let mut cursor = bytes.as_slice();
        for p in &mut self.params {
            let t = Tensor::read_tct(&mut cursor)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("shape mismatch for {}", p.name)));
            }
            p.value = t;
        }
        if !cursor.is_empty() {
            return Err(Error::Format("trailing bytes in params.tct".into()));
        }
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// SHA-256 of a checkpoint's payload file, without loading it.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join("params.tct"))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
