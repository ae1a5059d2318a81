//! Analytic parameter and multiply-accumulate counts.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, normalization,
//! activation, bias and residual additions are not counted. With
//! `L` patches, `L'` tokens entering the blocks (class token included),
//! `d` the width and `m` the hidden width of the feed-forward layer:
//!
//! | term             | MACs                       |
//! |------------------|----------------------------|
//! | patch embedding  | `L·d·C·p²`                 |
//! | q, k, v, out     | `4·L'·d²` per block        |
//! | scores, context  | `2·L'²·d` per block        |
//! | feed-forward     | `2·L'·d·m` per block       |
//! | head             | `d·classes`                |
//! | DW branches      | `d·L·k²` per branch        |

use std::fmt::Write as _;

use super::ModelConfig;
use crate::bypass::{extra_flops, extra_params};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopTerm {
    pub name: &'static str,
    pub formula: String,
    pub macs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub backbone_params: usize,
    pub dw_params: usize,
    pub total_params: usize,
    pub backbone_flops: usize,
    pub dw_flops: usize,
    pub total_flops: usize,
    /// BatchNorm parameters of the branches are excluded from `dw_params`.
    pub paper_convention: bool,
    pub terms: Vec<FlopTerm>,
}

/// `(backbone, dw)` parameter counts. Under `paper_convention` the branch
/// BatchNorm affine parameters are left out.
pub fn count_params(c: &ModelConfig, paper_convention: bool) -> (usize, usize) {
    let d = c.dim;
    let m = c.mlp_dim();
    let patch_embed = d * c.in_channels * c.patch_size * c.patch_size + d;
    let class_token = if c.use_class_token { d } else { 0 };
    let pos_embed = if c.use_pos_embed { c.num_tokens() * d } else { 0 };
    let layernorm = 2 * d;
    let attention = 4 * (d * d + d);
    let ffn = (d * m + m) + (m * d + d);
    let blocks = c.depth * (2 * layernorm + attention + ffn);
    let head = d * c.num_classes + c.num_classes;
    let backbone = patch_embed + class_token + pos_embed + blocks + layernorm + head;
    (backbone, extra_params(&c.bypass, d, c.depth, !paper_convention))
}

/// `(backbone, dw, terms)` multiply-accumulate counts for one image.
pub fn count_flops(c: &ModelConfig) -> (usize, usize, Vec<FlopTerm>) {
    let (d, m, l, lt) = (c.dim, c.mlp_dim(), c.num_patches(), c.num_tokens());
    let feat = c.in_channels * c.patch_size * c.patch_size;
    let depth = c.depth;
    let terms = vec![
        FlopTerm {
            name: "patch_embed",
            formula: format!("L*d*C*p^2 = {l}*{d}*{feat}"),
            macs: l * d * feat,
        },
        FlopTerm {
            name: "attn_proj",
            formula: format!("depth*4*L'*d^2 = {depth}*4*{lt}*{d}^2"),
            macs: depth * 4 * lt * d * d,
        },
        FlopTerm {
            name: "attn_scores",
            formula: format!("depth*2*L'^2*d = {depth}*2*{lt}^2*{d}"),
            macs: depth * 2 * lt * lt * d,
        },
        FlopTerm {
            name: "ffn",
            formula: format!("depth*2*L'*d*m = {depth}*2*{lt}*{d}*{m}"),
            macs: depth * 2 * lt * d * m,
        },
        FlopTerm {
            name: "head",
            formula: format!("d*classes = {d}*{}", c.num_classes),
            macs: d * c.num_classes,
        },
    ];
    let backbone = terms.iter().map(|t| t.macs).sum();
    let g = c.grid();
    let dw = extra_flops(&c.bypass, d, depth, g, g);
    let mut terms = terms;
    if dw > 0 {
        let ks: Vec<String> = c.bypass.kernel_sizes.iter().map(|k| format!("{k}^2")).collect();
        terms.push(FlopTerm {
            name: "dw_branches",
            formula: format!(
                "groups*d*L*sum(k^2) = {}*{d}*{l}*({})",
                c.bypass.num_groups(depth),
                ks.join("+")
            ),
            macs: dw,
        });
    }
    (backbone, dw, terms)
}

impl ComplexityReport {
    pub fn analyze(config: &ModelConfig, paper_convention: bool) -> Self {
        let (backbone_params, dw_params) = count_params(config, paper_convention);
        let (backbone_flops, dw_flops, terms) = count_flops(config);
        ComplexityReport {
            backbone_params,
            dw_params,
            total_params: backbone_params + dw_params,
            backbone_flops,
            dw_flops,
            total_flops: backbone_flops + dw_flops,
            paper_convention,
            terms,
        }
    }

    fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("backbone_params", self.backbone_params),
            ("dw_params", self.dw_params),
            ("total_params", self.total_params),
            ("backbone_flops", self.backbone_flops),
            ("dw_flops", self.dw_flops),
            ("total_flops", self.total_flops),
        ]
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let conv = if self.paper_convention {
            "branch BatchNorm excluded"
        } else {
            "branch BatchNorm included"
        };
        let _ = writeln!(s, "parameters ({conv}); FLOPs are multiply-accumulates");
        for (name, v) in self.rows() {
            let _ = writeln!(s, "  {name:<16} {v:>14}  ({:.3}{})", scaled(v).0, scaled(v).1);
        }
        let _ = writeln!(s, "FLOP terms");
        for t in &self.terms {
            let _ = writeln!(s, "  {:<16} {:>14}  {}", t.name, t.macs, t.formula);
        }
        s
    }

    /// `quantity,value` rows with a header, terms prefixed by `term:`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        for (name, v) in self.rows() {
            let _ = writeln!(s, "{name},{v}");
        }
        let _ = writeln!(s, "paper_convention,{}", self.paper_convention);
        for t in &self.terms {
            let _ = writeln!(s, "term:{},{}", t.name, t.macs);
        }
        s
    }
}

fn scaled(v: usize) -> (f64, &'static str) {
    let v = v as f64;
    if v >= 1e9 {
        (v / 1e9, "G")
    } else if v >= 1e6 {
        (v / 1e6, "M")
    } else if v >= 1e3 {
        (v / 1e3, "K")
    } else {
        (v, "")
    }
}
