//! Coarse-to-fine inference plans: which frames each denoiser call
//! generates, which already-generated frames it is guided by, and the
//! resulting dependency depth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::Csv;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    /// Keyframes at `levels[0]`, then interpolation and infilling.
    Hybrid,
    /// Stride-1 autoregressive windows, each guided by the previous one.
    Dense,
    /// Infilling only: the coarsest stride is `(F − 1) · levels[1]`.
    InfillOnly,
}

impl std::str::FromStr for PlanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" | "ctf" => Ok(PlanMode::Hybrid),
            "dense" => Ok(PlanMode::Dense),
            "infill-only" => Ok(PlanMode::InfillOnly),
            other => Err(Error::InvalidArgument(format!("unknown plan mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Generated by this call.
    New,
    /// Guided by the frame produced by the given earlier call.
    Guide(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceCall {
    pub id: usize,
    pub level: usize,
    pub stride: usize,
    /// `F` strictly increasing video frame indices.
    pub frames: Vec<usize>,
    pub slots: Vec<Slot>,
}

impl InferenceCall {
    pub fn new_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames
            .iter()
            .zip(&self.slots)
            .filter(|(_, s)| **s == Slot::New)
            .map(|(&f, _)| f)
    }

    pub fn guides(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.frames.iter().zip(&self.slots).filter_map(|(&f, s)| match s {
            Slot::Guide(c) => Some((f, *c)),
            Slot::New => None,
        })
    }

    /// Frame-rate condition: the stride, clamped to the trained range.
    pub fn fps(&self) -> u32 {
        self.stride.clamp(1, 30) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtfPlan {
    pub mode: PlanMode,
    pub length: usize,
    pub frames: usize,
    /// Strides, coarsest first, ending in 1.
    pub levels: Vec<usize>,
    pub calls: Vec<InferenceCall>,
}

fn check_common(length: usize, frames: usize) -> Result<()> {
    if frames < 2 {
        return Err(Error::Plan(format!("clips need at least 2 frames, got {frames}")));
    }
    if length < frames {
        return Err(Error::Plan(format!("video length {length} is shorter than a clip of {frames}")));
    }
    Ok(())
}

fn check_levels(levels: &[usize], frames: usize) -> Result<()> {
    if levels.last() != Some(&1) {
        return Err(Error::Plan(format!("levels {levels:?} must end in 1")));
    }
    for w in levels.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Plan(format!("levels {levels:?} must be strictly decreasing")));
        }
        if w[0] % w[1] != 0 {
            return Err(Error::Plan(format!(
                "level interval {} does not divide the previous interval {}",
                w[1], w[0]
            )));
        }
        if w[0] / w[1] > frames - 1 {
            return Err(Error::Plan(format!(
                "interval ratio {}/{} exceeds F - 1 = {}; a window cannot span two keyframes",
                w[0],
                w[1],
                frames - 1
            )));
        }
    }
    Ok(())
}

/// Plan builder over a shared "who generated frame i" table.
struct Builder {
    length: usize,
    frames: usize,
    owner: Vec<Option<usize>>,
    calls: Vec<InferenceCall>,
}

impl Builder {
    fn push(&mut self, level: usize, stride: usize, start: usize) {
        let id = self.calls.len();
        let frames: Vec<usize> = (0..self.frames).map(|j| start + j * stride).collect();
        let slots = frames
            .iter()
            .map(|&f| match self.owner[f] {
                Some(c) => Slot::Guide(c),
                None => Slot::New,
            })
            .collect();
        for &f in &frames {
            self.owner[f].get_or_insert(id);
        }
        self.calls.push(InferenceCall { id, level, stride, frames, slots });
    }

    /// Grid positions `0, s, 2s, …` not yet generated, as grid indices.
    fn first_open(&self, stride: usize, from: usize) -> Option<usize> {
        let n = (self.length - 1) / stride + 1;
        (from..n).find(|&g| self.owner[g * stride].is_none())
    }

    /// Autoregressive keyframes: each call after the first starts on the last
    /// generated grid point.
    fn chain_level(&mut self, level: usize, stride: usize) {
        let n = (self.length - 1) / stride + 1;
        let f = self.frames;
        let mut start = 0;
        loop {
            self.push(level, stride, start.min(n - f) * stride);
            match self.first_open(stride, start) {
                Some(q) => start = q - 1,
                None => break,
            }
        }
    }

    /// Windows over the finer grid, each starting on an already generated
    /// coarser keyframe. When `ratio` does not divide `F − 1` a window spills
    /// into the next gap; even-numbered windows run first so that the odd
    /// ones in between read the spill instead of chaining left to right.
    fn refine_level(&mut self, level: usize, stride: usize, ratio: usize) {
        let n = (self.length - 1) / stride + 1;
        let f = self.frames;
        if !(f - 1).is_multiple_of(ratio) {
            let hop = (f - 1) / ratio * ratio;
            for parity in [0, 1] {
                let mut j = parity;
                while j * hop < n {
                    let start = (j * hop).min(n - f);
                    if (start..start + f).any(|g| self.owner[g * stride].is_none()) {
                        self.push(level, stride, start * stride);
                    }
                    j += 2;
                }
            }
        }
        let mut from = 0;
        while let Some(q) = self.first_open(stride, from) {
            let start = (q - q % ratio).min(n - f);
            self.push(level, stride, start * stride);
            from = q;
        }
    }
}

/// Hierarchical plan over `levels` (coarsest first). Levels whose grid has
/// fewer than `frames` points are skipped; the first kept level chains
/// keyframes autoregressively and each later level fills in between.
pub fn plan_levels(mode: PlanMode, length: usize, frames: usize, levels: &[usize]) -> Result<CtfPlan> {
    check_common(length, frames)?;
    check_levels(levels, frames)?;
    let mut b = Builder {
        length,
        frames,
        owner: vec![None; length],
        calls: Vec::new(),
    };
    let mut started = false;
    for (k, &stride) in levels.iter().enumerate() {
        let points = (length - 1) / stride + 1;
        if !started {
            if points < frames {
                continue;
            }
            b.chain_level(k, stride);
            started = true;
        } else {
            b.refine_level(k, stride, levels[k - 1] / stride);
        }
    }
    let plan = CtfPlan {
        mode,
        length,
        frames,
        levels: levels.to_vec(),
        calls: b.calls,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn plan_hybrid(length: usize, frames: usize, levels: &[usize]) -> Result<CtfPlan> {
    plan_levels(PlanMode::Hybrid, length, frames, levels)
}

pub fn plan_dense(length: usize, frames: usize) -> Result<CtfPlan> {
    plan_levels(PlanMode::Dense, length, frames, &[1])
}

/// Infilling-only strides derived from `levels`: the coarsest keyframes sit
/// `(F − 1) · levels[1]` apart so that every finer window is guided by its
/// first and last frame only.
pub fn infill_only_levels(frames: usize, levels: &[usize]) -> Result<Vec<usize>> {
    if levels.len() < 2 {
        return Err(Error::Plan(format!("infill-only needs at least two levels, got {levels:?}")));
    }
    let mut out = vec![(frames - 1) * levels[1]];
    out.extend_from_slice(&levels[1..]);
    Ok(out)
}

pub fn plan_infill_only(length: usize, frames: usize, levels: &[usize]) -> Result<CtfPlan> {
    check_common(length, frames)?;
    let lv = infill_only_levels(frames, levels)?;
    plan_levels(PlanMode::InfillOnly, length, frames, &lv)
}

pub fn plan(mode: PlanMode, length: usize, frames: usize, levels: &[usize]) -> Result<CtfPlan> {
    match mode {
        PlanMode::Hybrid => plan_hybrid(length, frames, levels),
        PlanMode::Dense => plan_dense(length, frames),
        PlanMode::InfillOnly => plan_infill_only(length, frames, levels),
    }
}

impl CtfPlan {
    /// Stride of the coarsest configured level.
    pub fn coarsest_stride(&self) -> usize {
        self.levels[0]
    }

    /// Checks coverage, uniqueness, stride uniformity and provenance order.
    pub fn validate(&self) -> Result<()> {
        let mut owner: Vec<Option<usize>> = vec![None; self.length];
        for (pos, call) in self.calls.iter().enumerate() {
            if call.id != pos {
                return Err(Error::Plan(format!("call at position {pos} has id {}", call.id)));
            }
            if call.frames.len() != self.frames || call.slots.len() != self.frames {
                return Err(Error::Plan(format!("call {pos} has {} frames", call.frames.len())));
            }
            if call.stride == 0 || call.frames.windows(2).any(|w| w[1] != w[0] + call.stride) {
                return Err(Error::Plan(format!("call {pos} is not uniformly strided by {}", call.stride)));
            }
            if call.level >= self.levels.len() || self.levels[call.level] != call.stride {
                return Err(Error::Plan(format!("call {pos} stride {} does not match its level", call.stride)));
            }
            if call.frames.last().is_some_and(|&f| f >= self.length) {
                return Err(Error::Plan(format!("call {pos} reaches past frame {}", self.length - 1)));
            }
            for (&f, slot) in call.frames.iter().zip(&call.slots) {
                match (slot, owner[f]) {
                    (Slot::New, None) => {}
                    (Slot::New, Some(c)) => {
                        return Err(Error::Plan(format!("frame {f} generated by calls {c} and {pos}")));
                    }
                    (Slot::Guide(c), Some(o)) if *c == o => {}
                    (Slot::Guide(c), _) => {
                        return Err(Error::Plan(format!(
                            "call {pos} reads frame {f} from call {c}, which has not generated it"
                        )));
                    }
                }
            }
            for f in call.new_indices() {
                owner[f] = Some(pos);
            }
        }
        if let Some(f) = owner.iter().position(Option::is_none) {
            return Err(Error::Plan(format!("frame {f} is never generated")));
        }
        Ok(())
    }

    /// Longest dependency path ending at each call (a call with no guides has
    /// depth 1). Cyclic provenance is rejected.
    pub fn depths(&self) -> Result<Vec<usize>> {
        let n = self.calls.len();
        let mut deps: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for call in &self.calls {
            let mut d: Vec<usize> = call.guides().map(|(_, c)| c).collect();
            d.sort_unstable();
            d.dedup();
            for &p in &d {
                if p >= n {
                    return Err(Error::Plan(format!("call {} depends on missing call {p}", call.id)));
                }
                users[p].push(call.id);
            }
            indegree[call.id] = d.len();
            deps[call.id] = d;
        }
        let mut depth = vec![0usize; n];
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut done = 0;
        while let Some(i) = ready.pop() {
            depth[i] = 1 + deps[i].iter().map(|&p| depth[p]).max().unwrap_or(0);
            done += 1;
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.push(u);
                }
            }
        }
        if done != n {
            return Err(Error::Plan("dependency cycle between calls".into()));
        }
        Ok(depth)
    }

    pub fn chain_depth(&self) -> Result<usize> {
        Ok(self.depths()?.into_iter().max().unwrap_or(0))
    }

    /// Calls grouped by depth; calls within a group are independent.
    pub fn waves(&self) -> Result<Vec<Vec<usize>>> {
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.depths()?.into_iter().enumerate() {
            by.entry(d).or_default().push(i);
        }
        Ok(by.into_values().collect())
    }

    /// Human-readable table of calls, guides and their provenance.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5}  {:>5}  {:>6}  {:<28}  guides (frame<-call)", "call", "level", "stride", "frames");
        for c in &self.calls {
            let (first, last) = (c.frames[0], c.frames[c.frames.len() - 1]);
            let range = format!("{first}..={last} step {}", c.stride);
            let guides: Vec<String> = c.guides().map(|(f, p)| format!("{f}<-{p}")).collect();
            let guides = if guides.is_empty() { "-".to_string() } else { guides.join(" ") };
            let _ = writeln!(s, "{:>5}  {:>5}  {:>6}  {:<28}  {guides}", c.id, c.level, c.stride, range);
        }
        s
    }

    pub fn depth_csv(&self) -> Result<Csv> {
        let mut csv = Csv::new(&["call", "depth"]);
        for (i, d) in self.depths()?.into_iter().enumerate() {
            csv.row(&[i.to_string(), d.to_string()]);
        }
        Ok(csv)
    }

    pub fn summary(&self) -> Result<String> {
        Ok(format!("calls={} chain_depth={}", self.calls.len(), self.chain_depth()?))
    }
}
