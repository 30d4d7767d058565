//! Scenario configuration: a line-oriented sectioned text format (primary,
//! diff-friendly) and a JSON encoding of the same schema. Both lower to the
//! same raw document, which is then validated and turned into an
//! [`ExchangeScenario`].
//!
//! Text grammar, one entry per line:
//!
//! ```text
//! [scenario]                 # section header
//! key = value                # entry; '#' starts a comment
//! [device NAME]              # one section per device
//! ```
//!
//! Diagnostics carry the source line for text input; JSON syntax errors
//! carry serde_json's line/column, and semantic errors name the entity.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use pilotwave::devices::{BranchRewrite, DeviceError, DeviceEvent, OutcomeMap};
use pilotwave::notation::parse_state;
use pilotwave::packet::{GaussianPacket, PhysicalParams};
use pilotwave::protocol::ExchangeScenario;
use pilotwave::spin::SlotId;
use pilotwave::wavefunction::{DofId, DofInfo, DofRegistry, DofRole};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{subject}{}: {msg}", fmt_line(.line))]
    Semantic {
        subject: String,
        line: Option<usize>,
        msg: String,
    },
}

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" (line {n})"),
        None => String::new(),
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn semantic(subject: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Semantic {
        subject: subject.into(),
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Raw document (shared by both input encodings)

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default = "default_hbar")]
    hbar: f64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_n_sigma")]
    n_sigma: f64,
    #[serde(default = "default_readout_n_sigma")]
    readout_n_sigma: f64,
    t_end: f64,
    #[serde(default = "default_runs")]
    runs: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    trajectories: usize,
    #[serde(default = "default_stride")]
    trajectory_stride: usize,
}

fn default_hbar() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    0.02
}
fn default_n_sigma() -> f64 {
    5.0
}
fn default_readout_n_sigma() -> f64 {
    10.0
}
fn default_runs() -> usize {
    10_000
}
fn default_seed() -> u64 {
    42
}
fn default_stride() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDof {
    /// "particle" or "pointer".
    role: String,
    #[serde(default)]
    slot: Option<u8>,
    #[serde(default = "default_mass")]
    mass: f64,
}

fn default_mass() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPacket {
    center: f64,
    sigma: f64,
    #[serde(default)]
    wavenumber: f64,
    #[serde(default)]
    phase: f64,
    #[serde(default)]
    chirp: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind")]
enum RawDevice {
    #[serde(rename = "stern_gerlach")]
    SternGerlach {
        slot: u8,
        dof: String,
        out_a: String,
        out_b: String,
        #[serde(default)]
        readout: Option<[String; 2]>,
    },
    #[serde(rename = "bell_analyzer")]
    BellAnalyzer {
        slots: [u8; 2],
        dofs: [String; 2],
        pointer: String,
        outputs: [String; 4],
        dustbins: [String; 2],
        ready: String,
        #[serde(default)]
        readout: Option<[String; 4]>,
    },
    #[serde(rename = "pointer_recombiner")]
    PointerRecombiner {
        pointer: String,
        inputs: [String; 4],
        ready: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    state: String,
    packets: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    time: f64,
    device: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: RawScenario,
    #[serde(default)]
    output: Option<RawOutput>,
    /// Order assigns dof ids 0, 1, ...
    dofs: Vec<(String, RawDof)>,
    packets: BTreeMap<String, RawPacket>,
    initial: RawInitial,
    devices: BTreeMap<String, RawDevice>,
    events: Vec<RawEvent>,
}

/// Source lines of the entities a raw document was built from (text input
/// only); used to anchor semantic diagnostics.
#[derive(Debug, Default, Clone)]
struct LineMap {
    entries: BTreeMap<String, usize>,
}

impl LineMap {
    fn note(&mut self, key: impl Into<String>, line: usize) {
        self.entries.entry(key.into()).or_insert(line);
    }

    fn get(&self, key: &str) -> Option<usize> {
        self.entries.get(key).copied()
    }
}

// ---------------------------------------------------------------------------
// Text format

/// Splits `line` into (key, value) at the first '='.
fn key_value(line: &str, n: usize) -> Result<(&str, &str), ConfigError> {
    match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(syntax(n, format!("expected `key = value`, got `{line}`"))),
    }
}

fn parse_f64(s: &str, n: usize, what: &str) -> Result<f64, ConfigError> {
    s.parse()
        .map_err(|_| syntax(n, format!("{what}: `{s}` is not a number")))
}

fn parse_int<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<T, ConfigError> {
    s.parse()
        .map_err(|_| syntax(n, format!("{what}: `{s}` is not an integer")))
}

/// Parses `k1 v1 k2 v2 ...` token pairs into a map.
fn token_pairs(value: &str, n: usize) -> Result<BTreeMap<String, String>, ConfigError> {
    let tokens: Vec<&str> = value.split_whitespace().collect();
    if tokens.len() % 2 != 0 {
        return Err(syntax(n, format!("expected `key value` pairs, got `{value}`")));
    }
    let mut map = BTreeMap::new();
    for pair in tokens.chunks(2) {
        if map.insert(pair[0].to_string(), pair[1].to_string()).is_some() {
            return Err(syntax(n, format!("repeated field `{}`", pair[0])));
        }
    }
    Ok(map)
}

fn names<const K: usize>(value: &str, n: usize, what: &str) -> Result<[String; K], ConfigError> {
    let parts: Vec<String> = value.split_whitespace().map(str::to_string).collect();
    parts.try_into().map_err(|parts: Vec<String>| {
        syntax(
            n,
            format!("{what}: expected {K} names, got {}", parts.len()),
        )
    })
}

#[derive(Debug, Default)]
struct DeviceBuilder {
    kind: Option<(String, usize)>,
    fields: BTreeMap<String, (String, usize)>,
}

impl DeviceBuilder {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.fields.remove(key)
    }

    fn finish(mut self, name: &str, header_line: usize) -> Result<RawDevice, ConfigError> {
        let subject = format!("device `{name}`");
        let (kind, kind_line) = self
            .kind
            .take()
            .ok_or_else(|| semantic(&subject, Some(header_line), "missing `kind`"))?;
        let need = |fields: &mut Self, key: &str| {
            fields.take(key).ok_or_else(|| {
                semantic(&subject, Some(header_line), format!("missing `{key}`"))
            })
        };
        let device = match kind.as_str() {
            "stern_gerlach" => {
                let (slot, ln) = need(&mut self, "slot")?;
                let slot = parse_int::<u8>(&slot, ln, "slot")?;
                let (dof, _) = need(&mut self, "dof")?;
                let (out_a, _) = need(&mut self, "out_a")?;
                let (out_b, _) = need(&mut self, "out_b")?;
                let readout = match self.take("readout") {
                    Some((v, ln)) => Some(names::<2>(&v, ln, "readout")?),
                    None => None,
                };
                RawDevice::SternGerlach {
                    slot,
                    dof,
                    out_a,
                    out_b,
                    readout,
                }
            }
            "bell_analyzer" => {
                let (slots, ln) = need(&mut self, "slots")?;
                let slots = names::<2>(&slots, ln, "slots")?;
                let slots = [
                    parse_int::<u8>(&slots[0], ln, "slots")?,
                    parse_int::<u8>(&slots[1], ln, "slots")?,
                ];
                let (dofs, ln) = need(&mut self, "dofs")?;
                let dofs = names::<2>(&dofs, ln, "dofs")?;
                let (pointer, _) = need(&mut self, "pointer")?;
                let (outputs, ln) = need(&mut self, "outputs")?;
                let outputs = names::<4>(&outputs, ln, "outputs")?;
                let (dustbins, ln) = need(&mut self, "dustbins")?;
                let dustbins = names::<2>(&dustbins, ln, "dustbins")?;
                let (ready, _) = need(&mut self, "ready")?;
                let readout = match self.take("readout") {
                    Some((v, ln)) => Some(names::<4>(&v, ln, "readout")?),
                    None => None,
                };
                RawDevice::BellAnalyzer {
                    slots,
                    dofs,
                    pointer,
                    outputs,
                    dustbins,
                    ready,
                    readout,
                }
            }
            "pointer_recombiner" => {
                let (pointer, _) = need(&mut self, "pointer")?;
                let (inputs, ln) = need(&mut self, "inputs")?;
                let inputs = names::<4>(&inputs, ln, "inputs")?;
                let (ready, _) = need(&mut self, "ready")?;
                RawDevice::PointerRecombiner {
                    pointer,
                    inputs,
                    ready,
                }
            }
            other => {
                return Err(semantic(
                    &subject,
                    Some(kind_line),
                    format!("unknown kind `{other}`"),
                ))
            }
        };
        if let Some((stray, ln)) = self.fields.into_iter().next().map(|(k, (_, l))| (k, l)) {
            return Err(semantic(
                &subject,
                Some(ln),
                format!("unknown field `{stray}` for kind `{kind}`"),
            ));
        }
        Ok(device)
    }
}

fn parse_text(text: &str) -> Result<(RawConfig, LineMap), ConfigError> {
    #[derive(Debug, PartialEq)]
    enum Section {
        None,
        Scenario,
        Output,
        Dofs,
        Packets,
        Initial,
        Device(String, usize),
        Events,
    }

    let mut lines = LineMap::default();
    let mut scenario: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut output_dir: Option<String> = None;
    let mut dofs: Vec<(String, RawDof)> = Vec::new();
    let mut packets: BTreeMap<String, RawPacket> = BTreeMap::new();
    let mut initial_state: Option<(String, usize)> = None;
    let mut initial_packets: BTreeMap<String, String> = BTreeMap::new();
    let mut device_builders: Vec<(String, usize, DeviceBuilder)> = Vec::new();
    let mut events: Vec<RawEvent> = Vec::new();

    let mut section = Section::None;
    let mut saw_any_entry = false;
    for (idx, raw_line) in text.lines().enumerate() {
        let n = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        saw_any_entry = true;
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| syntax(n, "unterminated section header"))?
                .trim();
            section = match header {
                "scenario" => Section::Scenario,
                "output" => Section::Output,
                "dofs" => Section::Dofs,
                "packets" => Section::Packets,
                "initial" => Section::Initial,
                "events" => Section::Events,
                other => match other.strip_prefix("device ") {
                    Some(name) if !name.trim().is_empty() => {
                        let name = name.trim().to_string();
                        if device_builders.iter().any(|(d, _, _)| *d == name) {
                            return Err(syntax(n, format!("device `{name}` defined twice")));
                        }
                        device_builders.push((name.clone(), n, DeviceBuilder::default()));
                        lines.note(format!("device `{name}`"), n);
                        Section::Device(name, n)
                    }
                    _ => return Err(syntax(n, format!("unknown section `[{other}]`"))),
                },
            };
            continue;
        }

        let (key, value) = key_value(line, n)?;
        match &section {
            Section::None => {
                return Err(syntax(n, "entry before any section header"));
            }
            Section::Scenario => {
                if scenario
                    .insert(key.to_string(), (value.to_string(), n))
                    .is_some()
                {
                    return Err(syntax(n, format!("repeated scenario key `{key}`")));
                }
            }
            Section::Output => match key {
                "dir" => output_dir = Some(value.to_string()),
                other => return Err(syntax(n, format!("unknown output key `{other}`"))),
            },
            Section::Dofs => {
                if dofs.iter().any(|(d, _)| d == key) {
                    return Err(syntax(n, format!("dof `{key}` defined twice")));
                }
                let mut tokens = value.split_whitespace();
                let role = tokens
                    .next()
                    .ok_or_else(|| syntax(n, "expected `particle <slot>` or `pointer`"))?;
                let (role, slot) = match role {
                    "particle" => {
                        let slot = tokens
                            .next()
                            .ok_or_else(|| syntax(n, "particle needs a slot number"))?;
                        ("particle", Some(parse_int::<u8>(slot, n, "slot")?))
                    }
                    "pointer" => ("pointer", None),
                    other => return Err(syntax(n, format!("unknown dof role `{other}`"))),
                };
                let mass = match tokens.next() {
                    None => 1.0,
                    Some("mass") => {
                        let v = tokens
                            .next()
                            .ok_or_else(|| syntax(n, "`mass` needs a value"))?;
                        parse_f64(v, n, "mass")?
                    }
                    Some(other) => {
                        return Err(syntax(n, format!("unexpected token `{other}`")))
                    }
                };
                if let Some(stray) = tokens.next() {
                    return Err(syntax(n, format!("unexpected token `{stray}`")));
                }
                lines.note(format!("dof `{key}`"), n);
                dofs.push((
                    key.to_string(),
                    RawDof {
                        role: role.to_string(),
                        slot,
                        mass,
                    },
                ));
            }
            Section::Packets => {
                if packets.contains_key(key) {
                    return Err(syntax(n, format!("packet `{key}` defined twice")));
                }
                let fields = token_pairs(value, n)?;
                let get = |f: &str| -> Result<Option<f64>, ConfigError> {
                    fields
                        .get(f)
                        .map(|v| parse_f64(v, n, f))
                        .transpose()
                };
                let packet = RawPacket {
                    center: get("center")?
                        .ok_or_else(|| syntax(n, "packet needs `center`"))?,
                    sigma: get("sigma")?.ok_or_else(|| syntax(n, "packet needs `sigma`"))?,
                    wavenumber: get("wavenumber")?.unwrap_or(0.0),
                    phase: get("phase")?.unwrap_or(0.0),
                    chirp: get("chirp")?.unwrap_or(0.0),
                };
                for field in fields.keys() {
                    if !["center", "sigma", "wavenumber", "phase", "chirp"]
                        .contains(&field.as_str())
                    {
                        return Err(syntax(n, format!("unknown packet field `{field}`")));
                    }
                }
                lines.note(format!("packet `{key}`"), n);
                packets.insert(key.to_string(), packet);
            }
            Section::Initial => {
                if key == "state" {
                    if initial_state.is_some() {
                        return Err(syntax(n, "repeated `state`"));
                    }
                    initial_state = Some((value.to_string(), n));
                } else {
                    if initial_packets
                        .insert(key.to_string(), value.to_string())
                        .is_some()
                    {
                        return Err(syntax(n, format!("repeated initial packet for `{key}`")));
                    }
                    lines.note(format!("initial `{key}`"), n);
                }
            }
            Section::Device(name, _) => {
                let builder = &mut device_builders
                    .iter_mut()
                    .find(|(d, _, _)| d == name)
                    .expect("current section exists")
                    .2;
                if key == "kind" {
                    if builder.kind.is_some() {
                        return Err(syntax(n, "repeated `kind`"));
                    }
                    builder.kind = Some((value.to_string(), n));
                } else if builder
                    .fields
                    .insert(key.to_string(), (value.to_string(), n))
                    .is_some()
                {
                    return Err(syntax(n, format!("repeated field `{key}`")));
                }
            }
            Section::Events => {
                let time = parse_f64(key, n, "event time")?;
                lines.note(format!("event `{value}`@{key}"), n);
                events.push(RawEvent {
                    time,
                    device: value.to_string(),
                });
            }
        }
    }

    if !saw_any_entry {
        return Err(syntax(1, "empty config"));
    }

    // Assemble the scenario block with defaults.
    let mut take_f64 = |key: &str| -> Result<Option<f64>, ConfigError> {
        scenario
            .remove(key)
            .map(|(v, n)| parse_f64(&v, n, key))
            .transpose()
    };
    let hbar = take_f64("hbar")?.unwrap_or_else(default_hbar);
    let dt = take_f64("dt")?.unwrap_or_else(default_dt);
    let n_sigma = take_f64("n_sigma")?.unwrap_or_else(default_n_sigma);
    let readout_n_sigma = take_f64("readout_n_sigma")?.unwrap_or_else(default_readout_n_sigma);
    let t_end = take_f64("t_end")?.ok_or_else(|| {
        semantic("scenario", None, "missing required key `t_end`")
    })?;
    let mut take_int = |key: &str| -> Result<Option<(String, usize)>, ConfigError> {
        Ok(scenario.remove(key))
    };
    let runs = match take_int("runs")? {
        Some((v, n)) => parse_int::<usize>(&v, n, "runs")?,
        None => default_runs(),
    };
    let seed = match take_int("seed")? {
        Some((v, n)) => parse_int::<u64>(&v, n, "seed")?,
        None => default_seed(),
    };
    let trajectories = match take_int("trajectories")? {
        Some((v, n)) => parse_int::<usize>(&v, n, "trajectories")?,
        None => 0,
    };
    let trajectory_stride = match take_int("trajectory_stride")? {
        Some((v, n)) => parse_int::<usize>(&v, n, "trajectory_stride")?,
        None => default_stride(),
    };
    if let Some((key, (_, n))) = scenario.into_iter().next() {
        return Err(syntax(n, format!("unknown scenario key `{key}`")));
    }

    let (state, state_line) = initial_state
        .ok_or_else(|| semantic("initial", None, "missing `state`"))?;
    lines.note("initial state", state_line);

    let devices = device_builders
        .into_iter()
        .map(|(name, header, builder)| {
            let device = builder.finish(&name, header)?;
            Ok((name, device))
        })
        .collect::<Result<BTreeMap<_, _>, ConfigError>>()?;

    Ok((
        RawConfig {
            scenario: RawScenario {
                hbar,
                dt,
                n_sigma,
                readout_n_sigma,
                t_end,
                runs,
                seed,
                trajectories,
                trajectory_stride,
            },
            output: output_dir.map(|dir| RawOutput { dir }),
            dofs,
            packets,
            initial: RawInitial {
                state,
                packets: initial_packets,
            },
            devices,
            events,
        },
        lines,
    ))
}

// ---------------------------------------------------------------------------
// Semantic lowering

/// A fully validated scenario plus the config-declared output directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub scenario: ExchangeScenario,
    pub output_dir: Option<String>,
}

/// Parses either encoding: JSON when the first non-space byte is `{`,
/// the sectioned text format otherwise.
pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let (raw, lines) = if text.trim_start().starts_with('{') {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.line().max(1),
            msg: e.to_string(),
        })?;
        (raw, LineMap::default())
    } else {
        parse_text(text)?
    };
    lower(raw, &lines)
}

fn lower(raw: RawConfig, lines: &LineMap) -> Result<LoadedConfig, ConfigError> {
    // Degrees of freedom, ids in declaration order.
    if raw.dofs.is_empty() {
        return Err(semantic("dofs", None, "at least one dof is required"));
    }
    let mut infos = Vec::new();
    let mut ids: BTreeMap<String, DofId> = BTreeMap::new();
    for (i, (name, dof)) in raw.dofs.iter().enumerate() {
        let subject = format!("dof `{name}`");
        let id = DofId(i as u32);
        if ids.insert(name.clone(), id).is_some() {
            return Err(semantic(&subject, lines.get(&subject), "defined twice"));
        }
        let role = match (dof.role.as_str(), dof.slot) {
            ("particle", Some(slot)) => DofRole::Particle(SlotId(slot)),
            ("particle", None) => {
                return Err(semantic(&subject, lines.get(&subject), "particle needs a slot"))
            }
            ("pointer", None) => DofRole::Pointer,
            ("pointer", Some(_)) => {
                return Err(semantic(&subject, lines.get(&subject), "pointer has no slot"))
            }
            (other, _) => {
                return Err(semantic(
                    &subject,
                    lines.get(&subject),
                    format!("unknown role `{other}`"),
                ))
            }
        };
        infos.push(DofInfo {
            id,
            name: name.clone(),
            role,
            mass: dof.mass,
        });
    }
    let registry = DofRegistry::new(infos)
        .map_err(|e| semantic("dofs", None, e.to_string()))?;
    let registry = Arc::new(registry);

    // Packets.
    let mut packets: BTreeMap<String, GaussianPacket> = BTreeMap::new();
    for (name, p) in &raw.packets {
        let subject = format!("packet `{name}`");
        let packet = GaussianPacket::new(p.center, p.sigma)
            .map_err(|e| semantic(&subject, lines.get(&subject), e.to_string()))?
            .with_wavenumber(p.wavenumber)
            .with_phase(p.phase)
            .with_chirp(p.chirp);
        packets.insert(name.clone(), packet);
    }
    let packet = |name: &str, user: &str| -> Result<GaussianPacket, ConfigError> {
        packets.get(name).copied().ok_or_else(|| {
            semantic(user, lines.get(user), format!("unknown packet `{name}`"))
        })
    };
    let dof =
        |name: &str, user: &str| -> Result<DofId, ConfigError> {
            ids.get(name).copied().ok_or_else(|| {
                semantic(user, lines.get(user), format!("unknown dof `{name}`"))
            })
        };

    // Initial state and packets.
    let n_slots = registry
        .particle_slots()
        .iter()
        .map(|s| s.0)
        .max()
        .ok_or_else(|| semantic("dofs", None, "no particle dofs"))?;
    let initial_internal = parse_state(&raw.initial.state, n_slots).map_err(|e| {
        semantic(
            "initial state",
            lines.get("initial state"),
            format!("\n{}", e.render(&raw.initial.state)),
        )
    })?;
    let mut initial_packets = BTreeMap::new();
    for (dof_name, packet_name) in &raw.initial.packets {
        let subject = format!("initial `{dof_name}`");
        let id = dof(dof_name, &subject)?;
        initial_packets.insert(id, packet(packet_name, &subject)?);
    }
    for info in registry.dofs() {
        if !initial_packets.contains_key(&info.id) {
            return Err(semantic(
                "initial",
                None,
                format!("dof `{}` has no initial packet", info.name),
            ));
        }
    }

    // Devices.
    let mut rewrites: BTreeMap<String, (BranchRewrite, Option<OutcomeMap>)> = BTreeMap::new();
    for (name, device) in &raw.devices {
        let subject = format!("device `{name}`");
        let line = lines.get(&subject);
        let wrap = |e: DeviceError| -> ConfigError {
            let msg = match &e {
                DeviceError::NonDisjointOutputs { .. } => {
                    format!("disjointness violated: {e}")
                }
                _ => e.to_string(),
            };
            semantic(&subject, line, msg)
        };
        let (rewrite, readout) = match device {
            RawDevice::SternGerlach {
                slot,
                dof: dof_name,
                out_a,
                out_b,
                readout,
            } => {
                let d = dof(dof_name, &subject)?;
                let a = packet(out_a, &subject)?;
                let b = packet(out_b, &subject)?;
                let rewrite = BranchRewrite::stern_gerlach(
                    name,
                    SlotId(*slot),
                    d,
                    a,
                    b,
                    raw.scenario.n_sigma,
                )
                .map_err(wrap)?;
                let readout = readout.as_ref().map(|labels| OutcomeMap {
                    device: name.clone(),
                    dof: d,
                    outcomes: vec![(a, labels[0].clone()), (b, labels[1].clone())],
                });
                (rewrite, readout)
            }
            RawDevice::BellAnalyzer {
                slots,
                dofs,
                pointer,
                outputs,
                dustbins,
                ready,
                readout,
            } => {
                let d0 = dof(&dofs[0], &subject)?;
                let d1 = dof(&dofs[1], &subject)?;
                let dp = dof(pointer, &subject)?;
                let outs = [
                    packet(&outputs[0], &subject)?,
                    packet(&outputs[1], &subject)?,
                    packet(&outputs[2], &subject)?,
                    packet(&outputs[3], &subject)?,
                ];
                let bins = (packet(&dustbins[0], &subject)?, packet(&dustbins[1], &subject)?);
                let ready = packet(ready, &subject)?;
                let rewrite = BranchRewrite::bell_analyzer(
                    name,
                    (SlotId(slots[0]), SlotId(slots[1])),
                    (d0, d1),
                    dp,
                    outs,
                    bins,
                    ready,
                    raw.scenario.n_sigma,
                )
                .map_err(wrap)?;
                let readout = readout.as_ref().map(|labels| OutcomeMap {
                    device: name.clone(),
                    dof: dp,
                    outcomes: outs
                        .iter()
                        .zip(labels)
                        .map(|(p, l)| (*p, l.clone()))
                        .collect(),
                });
                (rewrite, readout)
            }
            RawDevice::PointerRecombiner {
                pointer,
                inputs,
                ready,
            } => {
                let dp = dof(pointer, &subject)?;
                let ins = [
                    packet(&inputs[0], &subject)?,
                    packet(&inputs[1], &subject)?,
                    packet(&inputs[2], &subject)?,
                    packet(&inputs[3], &subject)?,
                ];
                let ready = packet(ready, &subject)?;
                let rewrite = BranchRewrite::pointer_recombiner(name, dp, ins, ready)
                    .map_err(wrap)?;
                (rewrite, None)
            }
        };
        rewrites.insert(name.clone(), (rewrite, readout));
    }

    // Events.
    if raw.events.is_empty() {
        return Err(semantic("events", None, "at least one event is required"));
    }
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut events = Vec::new();
    for ev in &raw.events {
        let subject = format!("event `{}`@{}", ev.device, ev.time);
        let (rewrite, readout) = rewrites.get(&ev.device).cloned().ok_or_else(|| {
            semantic(&subject, lines.get(&subject), format!("unknown device `{}`", ev.device))
        })?;
        used.insert(ev.device.clone());
        events.push(DeviceEvent {
            time: ev.time,
            rewrite,
            readout,
        });
    }
    for name in rewrites.keys() {
        if !used.contains(name) {
            return Err(semantic(
                format!("device `{name}`"),
                lines.get(&format!("device `{name}`")),
                "defined but never scheduled",
            ));
        }
    }

    let scenario = ExchangeScenario {
        registry,
        params: PhysicalParams {
            hbar: raw.scenario.hbar,
        },
        initial_internal,
        initial_packets,
        events,
        t_end: raw.scenario.t_end,
        n_runs: raw.scenario.runs,
        base_seed: raw.scenario.seed,
        n_sigma: raw.scenario.n_sigma,
        readout_n_sigma: raw.scenario.readout_n_sigma,
        dt: raw.scenario.dt,
        trajectory_runs: raw.scenario.trajectories,
        trajectory_stride: raw.scenario.trajectory_stride.max(1),
    };
    Ok(LoadedConfig {
        scenario,
        output_dir: raw.output.map(|o| o.dir),
    })
}

// ---------------------------------------------------------------------------
// Bundled configs

pub const BUILTIN_CONFIGS: [(&str, &str); 3] = [
    ("exchange_default", include_str!("../configs/exchange_default.cfg")),
    ("exchange_drift", include_str!("../configs/exchange_drift.cfg")),
    ("recombine_default", include_str!("../configs/recombine_default.cfg")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN_CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_prepare() {
        for (name, text) in BUILTIN_CONFIGS {
            let loaded = parse_config(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            loaded
                .scenario
                .prepare()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn empty_config_fails_at_line_one() {
        let err = parse_config("").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }), "{err}");
        let err = parse_config("\n\n# only a comment\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }), "{err}");
    }

    #[test]
    fn overlapping_pointer_outputs_violate_disjointness() {
        let text = builtin("exchange_default").unwrap();
        let crowded = text.replace(
            "psi_beta     = center 20 sigma 0.25",
            "psi_beta     = center 10.3 sigma 0.25",
        );
        assert_ne!(text, crowded, "fixture drifted from the builtin config");
        let err = parse_config(&crowded).unwrap_err();
        assert!(err.to_string().contains("disjointness violated"), "{err}");
    }

    #[test]
    fn json_round_trip_of_the_default() {
        // A minimal JSON config equivalent to a two-particle splitter run.
        let json = r#"{
            "scenario": {"t_end": 2.0, "runs": 10, "seed": 7},
            "dofs": [
                ["x1", {"role": "particle", "slot": 1}],
                ["x2", {"role": "particle", "slot": 2}]
            ],
            "packets": {
                "phi": {"center": 0.0, "sigma": 1.0},
                "left": {"center": -25.0, "sigma": 1.0},
                "right": {"center": 25.0, "sigma": 1.0}
            },
            "initial": {
                "state": "alpha(1,2)",
                "packets": {"x1": "phi", "x2": "phi"}
            },
            "devices": {
                "sg1": {"kind": "stern_gerlach", "slot": 1, "dof": "x1",
                         "out_a": "left", "out_b": "right",
                         "readout": ["a", "b"]}
            },
            "events": [{"time": 1.0, "device": "sg1"}]
        }"#;
        let loaded = parse_config(json).unwrap();
        assert_eq!(loaded.scenario.n_runs, 10);
        loaded.scenario.prepare().unwrap();
    }

    #[test]
    fn unknown_references_name_the_entity() {
        let text = builtin("exchange_default").unwrap();
        let broken = text.replace("x2 = phi", "x2 = no_such_packet");
        let err = parse_config(&broken).unwrap_err();
        assert!(err.to_string().contains("no_such_packet"), "{err}");

        let broken = text.replace("1.0 = bell", "1.0 = not_a_device");
        let err = parse_config(&broken).unwrap_err();
        assert!(err.to_string().contains("not_a_device"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let err = parse_config("[scenario]\nt_end 3.5\n").unwrap_err();
        match err {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
