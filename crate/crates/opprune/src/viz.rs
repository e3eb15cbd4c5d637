//! Policy heatmaps: one row per (group, module), one column per layer.

use std::fmt::Write;

use opprune_core::model::{DecoderConfig, ModuleKind, Operation, Policy};

pub const RETAINED: &str = "retained";
pub const PRUNED: &str = "pruned";

fn rows(config: &DecoderConfig) -> impl Iterator<Item = (opprune_core::GroupId, ModuleKind)> + '_ {
    config
        .layout
        .ids()
        .flat_map(|g| ModuleKind::ALL.into_iter().map(move |m| (g, m)))
}

pub fn csv(config: &DecoderConfig, policy: &Policy) -> String {
    let layers = config.shape.layers;
    let mut s = String::from("group,module");
    for l in 1..=layers {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for (g, m) in rows(config) {
        write!(s, "{},{}", config.layout.name(g), m).unwrap();
        for l in 1..=layers {
            let cell = if policy.contains(&Operation::new(g, l, m)) {
                PRUNED
            } else {
                RETAINED
            };
            write!(s, ",{cell}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn svg(config: &DecoderConfig, policy: &Policy) -> String {
    const CELL: usize = 14;
    const LABEL: usize = 150;
    const HEADER: usize = 20;
    let layers = config.shape.layers as usize;
    let n_rows = config.layout.len() * ModuleKind::ALL.len();
    let width = LABEL + layers * CELL + 10;
    let height = HEADER + n_rows * CELL + 10;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    )
    .unwrap();
    for l in (1..=layers).step_by(if layers > 16 { 4 } else { 1 }) {
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#,
            LABEL + (l - 1) * CELL + CELL / 2,
            HEADER - 6
        )
        .unwrap();
    }
    for (row, (g, m)) in rows(config).enumerate() {
        let y = HEADER + row * CELL;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}/{}</text>"#,
            LABEL - 6,
            y + CELL - 3,
            escape(config.layout.name(g)),
            m
        )
        .unwrap();
        for l in 1..=layers {
            let pruned = policy.contains(&Operation::new(g, l as u16, m));
            let fill = if pruned { "#d9d9d9" } else { "#2b6cb0" };
            let state = if pruned { PRUNED } else { RETAINED };
            writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{}" height="{}" fill="{fill}" stroke="white"><title>{}/{m} layer {l}: {state}</title></rect>"#,
                LABEL + (l - 1) * CELL,
                CELL,
                CELL,
                escape(config.layout.name(g)),
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use opprune_core::model::{DecoderShape, TokenLayout};

    #[test]
    fn csv_cells_match_policy() {
        let cfg = DecoderConfig::new(
            DecoderShape::new(3, 4, 4, 8).unwrap(),
            TokenLayout::visual_split(1, 10, 20.0, 2).unwrap(),
        );
        let g2 = cfg.layout.find("g2").unwrap();
        let p = Policy::from_ops(cfg.digest(), [Operation::new(g2, 2, ModuleKind::Mlp)]);
        let text = csv(&cfg, &p);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "group,module,1,2,3");
        assert_eq!(lines.len(), 1 + cfg.layout.len() * 3);
        assert!(lines.contains(&"g2,mlp,retained,pruned,retained"));
        let cells: usize = lines[1..].iter().map(|l| l.split(',').count() - 2).sum();
        assert_eq!(cells, cfg.layout.len() * 3 * 3);
        assert_eq!(svg(&cfg, &p).matches("<rect").count(), cells);
    }
}
