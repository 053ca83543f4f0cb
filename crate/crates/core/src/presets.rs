//! Machine presets compiled into the library from `presets/*.toml`.

use serde::Deserialize;

use crate::model::{BandwidthCurve, MachinePreset, ModelError};

const PRESET_SOURCES: &[(&str, &str)] = &[
    ("emmy-stream", include_str!("../presets/emmy-stream.toml")),
    ("emmy-stream-nt", include_str!("../presets/emmy-stream-nt.toml")),
    ("meggie-stream-turbo-nt", include_str!("../presets/meggie-stream-turbo-nt.toml")),
    ("meggie-stream-1.2ghz-nt", include_str!("../presets/meggie-stream-1.2ghz-nt.toml")),
    ("hazelhen-stream-nt", include_str!("../presets/hazelhen-stream-nt.toml")),
    ("supermuc-ng-stream-nt", include_str!("../presets/supermuc-ng-stream-nt.toml")),
    ("supermuc-ng-slow-triad-nt", include_str!("../presets/supermuc-ng-slow-triad-nt.toml")),
];

/// On-disk layout of a preset file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetFile {
    pub name: String,
    pub cores_per_domain: usize,
    pub domains_per_node: usize,
    pub bandwidth_table: Vec<(usize, f64)>,
}

impl PresetFile {
    pub fn into_preset(self) -> Result<MachinePreset, ModelError> {
        let curve = BandwidthCurve::from_table(&self.bandwidth_table)?;
        if curve.cores() != self.cores_per_domain {
            return Err(ModelError::InvalidCurve(format!(
                "preset {}: table covers {} cores but cores_per_domain = {}",
                self.name,
                curve.cores(),
                self.cores_per_domain
            )));
        }
        if self.domains_per_node == 0 {
            return Err(ModelError::InvalidCurve(format!(
                "preset {}: domains_per_node must be at least 1",
                self.name
            )));
        }
        Ok(MachinePreset {
            name: self.name,
            cores_per_domain: self.cores_per_domain,
            domains_per_node: self.domains_per_node,
            curve,
        })
    }
}

/// Parses a preset from its TOML text.
pub fn parse_preset(text: &str) -> Result<MachinePreset, ModelError> {
    let file: PresetFile =
        toml::from_str(text).map_err(|e| ModelError::InvalidCurve(e.to_string()))?;
    file.into_preset()
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESET_SOURCES.iter().map(|(n, _)| *n)
}

/// Looks up a built-in preset by name.
pub fn preset(name: &str) -> Option<MachinePreset> {
    PRESET_SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| parse_preset(src).expect("built-in preset is valid"))
}
