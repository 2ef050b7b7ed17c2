//! Multi-scale fusion necks: FPN, PAFPN, PAFPN with shortcuts and R-PAFPN.
//!
//! Wiring shared by all variants:
//!
//! * a 1x1 lateral filter projects every backbone level to width `C`;
//! * a top-down junction adds the nearest-2x upsampled upper level;
//! * a bottom-up junction adds a stride-2 3x3 filtered lower level;
//! * every junction feeds a 3x3 fusion filter;
//! * every filter is followed by batch norm and ReLU; fusion nodes of the
//!   shortcut variants compute `relu(bn(fuse(x)) + x)`.
//!
//! FPN runs one top-down pass. PAFPN appends a bottom-up pass. R-PAFPN runs
//! the bottom-up pass first and the top-down pass second.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;

use crate::block::{FilterBlock, ParamMut};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{upsample_backward, InputRule};
use crate::layers::{upsample_nearest_2x, FilterKind};
use crate::tensor::{Shape4, Tensor4};

pub const MIN_LEVELS: usize = 2;
pub const MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeckKind {
    Fpn,
    Pafpn,
    PafpnShortcut,
    Rpafpn,
}

impl NeckKind {
    pub const ALL: [NeckKind; 4] = [
        NeckKind::Fpn,
        NeckKind::Pafpn,
        NeckKind::PafpnShortcut,
        NeckKind::Rpafpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NeckKind::Fpn => "fpn",
            NeckKind::Pafpn => "pafpn",
            NeckKind::PafpnShortcut => "pafpn-shortcut",
            NeckKind::Rpafpn => "rpafpn",
        }
    }

    /// Whether every 3x3 fusion filter carries a residual skip.
    pub fn has_shortcuts(self) -> bool {
        matches!(self, NeckKind::PafpnShortcut | NeckKind::Rpafpn)
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fpn" => Ok(NeckKind::Fpn),
            "pafpn" => Ok(NeckKind::Pafpn),
            "pafpn-shortcut" => Ok(NeckKind::PafpnShortcut),
            "rpafpn" | "r-pafpn" => Ok(NeckKind::Rpafpn),
            other => Err(Error::Config(format!("unknown neck `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// 1x1 projection of a backbone level.
    Lateral1x1,
    /// 3x3 stride-1 fusion filter.
    Fuse3x3,
    /// `a + upsample2x(b)`, with `b` one level up.
    UpsampleAdd,
    /// `a + down(b)`, with `b` one level down and `down` a stride-2 3x3 filter.
    DownsampleAdd,
    /// Stride-2 3x3 filter producing an extra level above the top.
    Downsample3x3,
    /// Marks the node feeding an output level.
    Identity,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Lateral1x1 => "Lateral1x1",
            NodeKind::Fuse3x3 => "Fuse3x3",
            NodeKind::UpsampleAdd => "UpsampleAdd",
            NodeKind::DownsampleAdd => "DownsampleAdd",
            NodeKind::Downsample3x3 => "Downsample3x3",
            NodeKind::Identity => "Identity",
        }
    }

    pub fn has_filter(self) -> bool {
        !matches!(self, NodeKind::UpsampleAdd | NodeKind::Identity)
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Lateral1x1" => NodeKind::Lateral1x1,
            "Fuse3x3" => NodeKind::Fuse3x3,
            "UpsampleAdd" => NodeKind::UpsampleAdd,
            "DownsampleAdd" => NodeKind::DownsampleAdd,
            "Downsample3x3" => NodeKind::Downsample3x3,
            "Identity" => NodeKind::Identity,
            other => return Err(Error::Graph(format!("unknown node kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Backbone(usize),
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub filter_kind: Option<FilterKind>,
    pub has_residual: bool,
    /// Pyramid index, 0 = highest resolution.
    pub level: usize,
    pub inputs: Vec<Source>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeckConfig {
    pub kind: NeckKind,
    pub in_channels: Vec<usize>,
    pub channels: usize,
    pub filter_kind: FilterKind,
    /// Extra stride-2 levels above the top input level.
    pub extra_levels: usize,
    /// Name of the lowest level (`P3` → 3).
    pub first_level: usize,
}

impl NeckConfig {
    pub fn new(kind: NeckKind, in_channels: Vec<usize>, channels: usize, filter_kind: FilterKind) -> Self {
        Self {
            kind,
            in_channels,
            channels,
            filter_kind,
            extra_levels: 0,
            first_level: 3,
        }
    }

    pub fn levels(&self) -> usize {
        self.in_channels.len()
    }
}

/// A wired neck. Nodes are stored in construction order, which is a
/// topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionGraph {
    pub config: NeckConfig,
    pub nodes: Vec<Node>,
}

struct Builder {
    nodes: Vec<Node>,
    filter_kind: FilterKind,
}

impl Builder {
    fn push(&mut self, kind: NodeKind, level: usize, residual: bool, inputs: Vec<Source>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            kind,
            filter_kind: kind.has_filter().then_some(self.filter_kind),
            has_residual: residual,
            level,
            inputs,
        });
        id
    }

    fn fuse(&mut self, level: usize, residual: bool, input: usize) -> usize {
        self.push(NodeKind::Fuse3x3, level, residual, vec![Source::Node(input)])
    }

    /// `inner[top] = base[top]`, `inner[l] = base[l] + up(inner[l+1])`.
    fn top_down(&mut self, base: &[usize]) -> Vec<usize> {
        let top = base.len() - 1;
        let mut inner = base.to_vec();
        for l in (0..top).rev() {
            inner[l] = self.push(
                NodeKind::UpsampleAdd,
                l,
                false,
                vec![Source::Node(base[l]), Source::Node(inner[l + 1])],
            );
        }
        inner
    }

    /// `d[0] = base[0]`, `d[l] = base[l] + down(d[l-1])`.
    fn bottom_up(&mut self, base: &[usize]) -> Vec<usize> {
        let mut d = base.to_vec();
        for l in 1..base.len() {
            d[l] = self.push(
                NodeKind::DownsampleAdd,
                l,
                false,
                vec![Source::Node(base[l]), Source::Node(d[l - 1])],
            );
        }
        d
    }
}

/// Builds the graph for `config`.
pub fn build_neck(config: &NeckConfig) -> Result<FusionGraph> {
    let levels = config.levels();
    if !(MIN_LEVELS..=MAX_LEVELS).contains(&levels) {
        return Err(Error::Graph(format!(
            "unsupported level count {levels} (expected {MIN_LEVELS}..={MAX_LEVELS})"
        )));
    }
    if levels + config.extra_levels > MAX_LEVELS {
        return Err(Error::Graph(format!(
            "{} extra levels exceed the {MAX_LEVELS}-level limit",
            config.extra_levels
        )));
    }
    if config.channels == 0 || config.in_channels.iter().any(|&c| c == 0) {
        return Err(Error::Graph("channel counts must be positive".into()));
    }
    let residual = config.kind.has_shortcuts();
    let mut b = Builder {
        nodes: Vec::new(),
        filter_kind: config.filter_kind,
    };
    let lat: Vec<usize> = (0..levels)
        .map(|l| b.push(NodeKind::Lateral1x1, l, false, vec![Source::Backbone(l)]))
        .collect();
    let top = levels - 1;

    let outs: Vec<usize> = match config.kind {
        NeckKind::Fpn => {
            let inner = b.top_down(&lat);
            (0..levels).map(|l| b.fuse(l, false, inner[l])).collect()
        }
        NeckKind::Pafpn | NeckKind::PafpnShortcut => {
            let inner = b.top_down(&lat);
            let fpn: Vec<usize> = (0..levels).map(|l| b.fuse(l, residual, inner[l])).collect();
            let d = b.bottom_up(&fpn);
            (0..levels)
                .map(|l| if l == 0 { fpn[0] } else { b.fuse(l, residual, d[l]) })
                .collect()
        }
        NeckKind::Rpafpn => {
            let d = b.bottom_up(&lat);
            let up: Vec<usize> = (0..levels).map(|l| b.fuse(l, residual, d[l])).collect();
            let inner = b.top_down(&up);
            (0..levels)
                .map(|l| if l == top { up[top] } else { b.fuse(l, residual, inner[l]) })
                .collect()
        }
    };

    let mut all_outs = outs;
    for e in 0..config.extra_levels {
        let src = *all_outs.last().expect("at least two levels");
        let id = b.push(NodeKind::Downsample3x3, levels + e, false, vec![Source::Node(src)]);
        all_outs.push(id);
    }
    for (l, &src) in all_outs.iter().enumerate() {
        b.push(NodeKind::Identity, l, false, vec![Source::Node(src)]);
    }
    let g = FusionGraph {
        config: config.clone(),
        nodes: b.nodes,
    };
    g.validate()?;
    Ok(g)
}

impl FusionGraph {
    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn output_levels(&self) -> usize {
        self.config.levels() + self.config.extra_levels
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Kahn's algorithm, lowest id first. Errors on a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users = vec![Vec::new(); n];
        for node in &self.nodes {
            for s in &node.inputs {
                if let Source::Node(src) = *s {
                    if src >= n {
                        return Err(Error::Graph(format!("node {} reads missing node {src}", node.id)));
                    }
                    indegree[node.id] += 1;
                    users[src].push(node.id);
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("graph has a cycle".into()));
        }
        Ok(order)
    }

    /// Node id producing each output level.
    pub fn outputs(&self) -> Vec<usize> {
        let mut outs: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Identity)
            .map(|n| (n.level, n.id))
            .collect();
        outs.sort_unstable();
        outs.into_iter().map(|(_, id)| id).collect()
    }

    /// Structural checks: ids, arity, level wiring, acyclicity, single
    /// producer per output level and the residual rule of the variant.
    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        let total = self.output_levels();
        if !(MIN_LEVELS..=MAX_LEVELS).contains(&levels) || total > MAX_LEVELS {
            return Err(Error::Graph(format!("unsupported level count {levels}")));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let err = |msg: String| Error::Graph(format!("node {}: {msg}", node.id));
            if node.id != i {
                return Err(err(format!("expected id {i}")));
            }
            if node.level >= total {
                return Err(err(format!("level {} out of range", node.level)));
            }
            if node.kind.has_filter() != node.filter_kind.is_some() {
                return Err(err("filter kind present on a parameterless node or missing".into()));
            }
            if node.has_residual && node.kind != NodeKind::Fuse3x3 {
                return Err(err("only fusion nodes carry residual skips".into()));
            }
            let level_of = |s: &Source| -> Result<usize> {
                match *s {
                    Source::Backbone(l) if l < levels => Ok(l),
                    Source::Backbone(l) => Err(err(format!("backbone level {l} out of range"))),
                    Source::Node(j) => self
                        .nodes
                        .get(j)
                        .map(|n| n.level)
                        .ok_or_else(|| err(format!("missing input node {j}"))),
                }
            };
            let expect_nodes = node.kind != NodeKind::Lateral1x1;
            if node
                .inputs
                .iter()
                .any(|s| matches!(s, Source::Node(_)) != expect_nodes)
            {
                return Err(err("input source type does not match node kind".into()));
            }
            let lv: Vec<usize> = node.inputs.iter().map(level_of).collect::<Result<_>>()?;
            let ok = match node.kind {
                NodeKind::Lateral1x1 | NodeKind::Fuse3x3 | NodeKind::Identity => {
                    lv.len() == 1 && lv[0] == node.level
                }
                NodeKind::UpsampleAdd => lv.len() == 2 && lv[0] == node.level && lv[1] == node.level + 1,
                NodeKind::DownsampleAdd => {
                    lv.len() == 2 && lv[0] == node.level && lv[1] + 1 == node.level
                }
                NodeKind::Downsample3x3 => lv.len() == 1 && lv[0] + 1 == node.level,
            };
            if !ok {
                return Err(err(format!("inconsistent inputs for {}", node.kind.name())));
            }
            if node.kind == NodeKind::Lateral1x1 && node.level >= levels {
                return Err(err("lateral above the input pyramid".into()));
            }
        }
        self.topological_order()?;
        let mut produced = vec![0usize; total];
        for n in self.nodes.iter().filter(|n| n.kind == NodeKind::Identity) {
            produced[n.level] += 1;
        }
        if let Some(l) = produced.iter().position(|&c| c != 1) {
            return Err(Error::Graph(format!(
                "output level {l} has {} producers",
                produced[l]
            )));
        }
        let shortcuts = self.config.kind.has_shortcuts();
        if self
            .nodes
            .iter()
            .any(|n| n.kind == NodeKind::Fuse3x3 && n.has_residual != shortcuts)
        {
            return Err(Error::Graph(format!(
                "{} requires residual skips on {} fusion nodes",
                self.config.kind,
                if shortcuts { "all" } else { "no" }
            )));
        }
        Ok(())
    }

    fn level_name(&self, l: usize) -> String {
        format!("P{}", self.config.first_level + l)
    }

    /// Deterministic text form: a header line, then one node per line as
    /// `id kind filter residual level inputs`.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let ins: Vec<String> = c.in_channels.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "fusion-graph kind={} levels={} extra={} first={} channels={} filter={} in={}",
            c.kind,
            c.levels(),
            c.extra_levels,
            c.first_level,
            c.channels,
            c.filter_kind,
            ins.join(",")
        );
        for n in &self.nodes {
            let inputs: Vec<String> = n
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Backbone(l) => format!("in:{}", self.level_name(l)),
                    Source::Node(j) => format!("n{j}"),
                })
                .collect();
            let _ = writeln!(
                s,
                "{} {} {} residual={} {} {}",
                n.id,
                n.kind.name(),
                n.filter_kind.map_or("-", |k| k.name()),
                u8::from(n.has_residual),
                self.level_name(n.level),
                inputs.join(",")
            );
        }
        s
    }

    /// Parses [`FusionGraph::to_text`] output and validates it.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Graph("empty graph text".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("fusion-graph") {
            return Err(Error::Graph("missing `fusion-graph` header".into()));
        }
        let (mut kind, mut levels, mut extra, mut first, mut channels, mut filter, mut ins) =
            (None, None, None, None, None, None, None);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Graph(format!("bad header field `{f}`")))?;
            let num = || v.parse::<usize>().map_err(|_| Error::Graph(format!("bad number in `{f}`")));
            match k {
                "kind" => kind = Some(v.parse::<NeckKind>()?),
                "levels" => levels = Some(num()?),
                "extra" => extra = Some(num()?),
                "first" => first = Some(num()?),
                "channels" => channels = Some(num()?),
                "filter" => filter = Some(v.parse::<FilterKind>()?),
                "in" => {
                    ins = Some(
                        v.split(',')
                            .map(|x| x.parse::<usize>().map_err(|_| Error::Graph(format!("bad channel `{x}`"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                other => return Err(Error::Graph(format!("unknown header field `{other}`"))),
            }
        }
        let missing = |what: &str| Error::Graph(format!("header lacks `{what}`"));
        let in_channels = ins.ok_or_else(|| missing("in"))?;
        if Some(in_channels.len()) != levels {
            return Err(Error::Graph("`levels` disagrees with `in`".into()));
        }
        let first_level = first.ok_or_else(|| missing("first"))?;
        if first_level > 64 {
            return Err(Error::Graph("`first` out of range".into()));
        }
        let config = NeckConfig {
            kind: kind.ok_or_else(|| missing("kind"))?,
            in_channels,
            channels: channels.ok_or_else(|| missing("channels"))?,
            filter_kind: filter.ok_or_else(|| missing("filter"))?,
            extra_levels: extra.ok_or_else(|| missing("extra"))?,
            first_level,
        };
        let parse_level = |s: &str| -> Result<usize> {
            let n: usize = s
                .strip_prefix('P')
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| Error::Graph(format!("bad level `{s}`")))?;
            n.checked_sub(first_level)
                .ok_or_else(|| Error::Graph(format!("level `{s}` below first level")))
        };
        let mut nodes = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::Graph(format!("bad node line `{line}`")));
            }
            let id: usize = parts[0]
                .parse()
                .map_err(|_| Error::Graph(format!("bad node id `{}`", parts[0])))?;
            let kind: NodeKind = parts[1].parse()?;
            let filter_kind = match parts[2] {
                "-" => None,
                k => Some(k.parse::<FilterKind>()?),
            };
            let has_residual = match parts[3] {
                "residual=0" => false,
                "residual=1" => true,
                other => return Err(Error::Graph(format!("bad residual flag `{other}`"))),
            };
            let level = parse_level(parts[4])?;
            let inputs = parts[5]
                .split(',')
                .map(|s| {
                    if let Some(l) = s.strip_prefix("in:") {
                        parse_level(l).map(Source::Backbone)
                    } else if let Some(j) = s.strip_prefix('n') {
                        j.parse()
                            .map(Source::Node)
                            .map_err(|_| Error::Graph(format!("bad input `{s}`")))
                    } else {
                        Err(Error::Graph(format!("bad input `{s}`")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            nodes.push(Node {
                id,
                kind,
                filter_kind,
                has_residual,
                level,
                inputs,
            });
        }
        let g = FusionGraph { config, nodes };
        g.validate()?;
        Ok(g)
    }
}

/// A fusion graph with parameters.
#[derive(Debug, Clone)]
pub struct Neck {
    graph: FusionGraph,
    order: Vec<usize>,
    blocks: Vec<Option<FilterBlock>>,
    /// Spatial shape of each node output from the last training forward.
    shapes: Vec<Option<Shape4>>,
}

impl Neck {
    pub fn new<R: Rng + ?Sized>(graph: FusionGraph, rng: &mut R) -> Result<Self> {
        graph.validate()?;
        let c = graph.config.channels;
        let mut blocks = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let fk = node.filter_kind.unwrap_or(graph.config.filter_kind);
            let block = match node.kind {
                NodeKind::Lateral1x1 => {
                    let c_in = graph.config.in_channels[node.level];
                    Some(FilterBlock::init(fk, c_in, c, 1, 1, true, true, rng)?)
                }
                NodeKind::Fuse3x3 => Some(
                    FilterBlock::init(fk, c, c, 3, 1, true, true, rng)?.with_residual(node.has_residual),
                ),
                NodeKind::DownsampleAdd | NodeKind::Downsample3x3 => {
                    Some(FilterBlock::init(fk, c, c, 3, 2, true, true, rng)?)
                }
                NodeKind::UpsampleAdd | NodeKind::Identity => None,
            };
            blocks.push(block);
        }
        let order = graph.topological_order()?;
        let n = graph.nodes.len();
        Ok(Self {
            graph,
            order,
            blocks,
            shapes: vec![None; n],
        })
    }

    pub fn graph(&self) -> &FusionGraph {
        &self.graph
    }

    pub fn block(&self, id: usize) -> Option<&FilterBlock> {
        self.blocks.get(id).and_then(|b| b.as_ref())
    }

    pub fn block_mut(&mut self, id: usize) -> Option<&mut FilterBlock> {
        self.blocks.get_mut(id).and_then(|b| b.as_mut())
    }

    pub fn set_input_rule(&mut self, rule: InputRule) {
        for b in self.blocks.iter_mut().flatten() {
            b.input_rule = rule;
        }
    }

    fn check_pyramid(&self, pyramid: &[Tensor4]) -> Result<()> {
        let cfg = &self.graph.config;
        if pyramid.len() != cfg.levels() {
            return Err(Error::Shape(format!(
                "neck expects {} levels, got {}",
                cfg.levels(),
                pyramid.len()
            )));
        }
        for (l, t) in pyramid.iter().enumerate() {
            let s = t.shape();
            if s.c != cfg.in_channels[l] {
                return Err(Error::Shape(format!(
                    "level {l} has {} channels, expected {}",
                    s.c, cfg.in_channels[l]
                )));
            }
            if l > 0 {
                let p = pyramid[l - 1].shape();
                if p.n != s.n || p.h != 2 * s.h || p.w != 2 * s.w {
                    return Err(Error::Shape(format!(
                        "spatial sizes must halve level to level: {} then {}",
                        p, s
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the graph. Returns one tensor per output level.
    pub fn forward(&mut self, pyramid: &[Tensor4], training: bool) -> Result<Vec<Tensor4>> {
        self.check_pyramid(pyramid)?;
        let mut values: Vec<Option<Tensor4>> = vec![None; self.graph.nodes.len()];
        for &id in &self.order {
            let node = &self.graph.nodes[id];
            let get = |s: &Source| -> &Tensor4 {
                match *s {
                    Source::Backbone(l) => &pyramid[l],
                    Source::Node(j) => values[j].as_ref().expect("topological order"),
                }
            };
            let out = match node.kind {
                NodeKind::Lateral1x1 | NodeKind::Fuse3x3 | NodeKind::Downsample3x3 => {
                    let x = get(&node.inputs[0]).clone();
                    self.blocks[id].as_mut().expect("filter node").forward(&x, training)?
                }
                NodeKind::UpsampleAdd => {
                    let up = upsample_nearest_2x(get(&node.inputs[1]));
                    get(&node.inputs[0]).add(&up)?
                }
                NodeKind::DownsampleAdd => {
                    let a = get(&node.inputs[0]).clone();
                    let b = get(&node.inputs[1]).clone();
                    let down = self.blocks[id].as_mut().expect("filter node").forward(&b, training)?;
                    a.add(&down)?
                }
                NodeKind::Identity => get(&node.inputs[0]).clone(),
            };
            self.shapes[id] = Some(out.shape());
            values[id] = Some(out);
        }
        Ok(self
            .graph
            .outputs()
            .into_iter()
            .map(|id| values[id].take().expect("output computed"))
            .collect())
    }

    /// Backpropagates output-level gradients through the last training
    /// forward. Returns gradients for the input pyramid.
    pub fn backward(&mut self, grads: &[Tensor4]) -> Result<Vec<Tensor4>> {
        let outs = self.graph.outputs();
        if grads.len() != outs.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for {} outputs",
                grads.len(),
                outs.len()
            )));
        }
        let n = self.graph.nodes.len();
        let mut node_grads: Vec<Option<Tensor4>> = vec![None; n];
        for (id, g) in outs.into_iter().zip(grads) {
            node_grads[id] = Some(g.clone());
        }
        let mut backbone: Vec<Option<Tensor4>> = vec![None; self.graph.levels()];
        fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }
        for &id in self.order.iter().rev() {
            let Some(g) = node_grads[id].take() else { continue };
            let node = self.graph.nodes[id].clone();
            let mut send = |s: Source, g: Tensor4, node_grads: &mut Vec<Option<Tensor4>>| match s {
                Source::Backbone(l) => accumulate(&mut backbone[l], g),
                Source::Node(j) => accumulate(&mut node_grads[j], g),
            };
            match node.kind {
                NodeKind::Lateral1x1 | NodeKind::Fuse3x3 | NodeKind::Downsample3x3 => {
                    let gx = self.blocks[id].as_mut().expect("filter node").backward(&g)?;
                    send(node.inputs[0], gx, &mut node_grads)?;
                }
                NodeKind::UpsampleAdd => {
                    send(node.inputs[1], upsample_backward(&g)?, &mut node_grads)?;
                    send(node.inputs[0], g, &mut node_grads)?;
                }
                NodeKind::DownsampleAdd => {
                    let gx = self.blocks[id].as_mut().expect("filter node").backward(&g)?;
                    send(node.inputs[1], gx, &mut node_grads)?;
                    send(node.inputs[0], g, &mut node_grads)?;
                }
                NodeKind::Identity => send(node.inputs[0], g, &mut node_grads)?,
            }
        }
        backbone
            .into_iter()
            .enumerate()
            .map(|(l, g)| {
                g.ok_or_else(|| Error::Graph(format!("backbone level {l} received no gradient")))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for b in self.blocks.iter_mut().flatten() {
            b.zero_grad();
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        for (id, b) in self.blocks.iter_mut().enumerate() {
            if let Some(b) = b {
                b.visit_params(&format!("{prefix}.n{id}"), f);
            }
        }
    }

    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) -> Result<()> {
        for (id, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                b.save(&format!("{prefix}.n{id}"), ckpt)?;
            }
        }
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (id, b) in self.blocks.iter_mut().enumerate() {
            if let Some(b) = b {
                b.load(&format!("{prefix}.n{id}"), ckpt)?;
            }
        }
        Ok(())
    }

    /// Blocks in node order, for inspection.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, &FilterBlock)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (i, b)))
    }
}

/// Inference-mode evaluation of a neck.
pub fn neck_forward(neck: &mut Neck, pyramid: &[Tensor4]) -> Result<Vec<Tensor4>> {
    neck.forward(pyramid, false)
}
