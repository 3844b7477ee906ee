//! Parameter and multiply-add accounting.
//!
//! One MAC is one multiply-accumulate. Convolution MAC is the kernel size
//! times the number of output positions, so for every layer
//! `mac = params * D_F_out^2`; bias adds count one MAC per output element,
//! which keeps the identity for box heads as well. Element-wise recurrent
//! arithmetic (gate products, sums, activations) is not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{Alphas, ArchSpec, LayerKind, LayerSpec, NetPart};
use crate::error::Result;
use crate::recurrent::{BottleneckForm, GateLayout, RecurrentConfig, RecurrentKind};

/// Closed-form cost of a standard convolutional LSTM whose four gates each
/// use a depthwise-separable convolution over `[x, h]`.
pub fn lstm_cost(m: u64, n: u64, df: u64, dk: u64) -> u64 {
    4 * gate_cost(m, n, df, dk)
}

/// Same as [`lstm_cost`] with three gates.
pub fn gru_cost(m: u64, n: u64, df: u64, dk: u64) -> u64 {
    3 * gate_cost(m, n, df, dk)
}

fn gate_cost(m: u64, n: u64, df: u64, dk: u64) -> u64 {
    let area = df * df;
    dk * dk * (m + n) * area + (m + n) * n * area
}

/// Counting convention for the Bottleneck-LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostForm {
    /// Closed form: bottleneck gate over `[x, h]` plus four `N`-channel gates.
    ClosedForm,
    /// Sum over the four convolutions of the layer as built.
    LayerSum,
}

pub fn bottleneck_cost(m: u64, n: u64, df: u64, dk: u64, form: CostForm) -> u64 {
    let area = df * df;
    let k2 = dk * dk;
    match form {
        CostForm::ClosedForm => k2 * (m + n) * area + (m + n) * n * area + 4 * (k2 * n * area + n * n * area),
        CostForm::LayerSum => (k2 * m + (m + n) * n + k2 * n + 4 * n * n) * area,
    }
}

/// Which of two layers is cheaper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Crossover {
    RivalCheaper,
    Equal,
    BottleneckCheaper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub vs_lstm: Crossover,
    pub vs_gru: Crossover,
}

/// Exact integer comparison of the closed-form costs. `D_F` cancels, so
/// one spatial position is used.
pub fn crossover_check(m: u64, n: u64, dk: u64) -> CrossoverReport {
    let b = bottleneck_cost(m, n, 1, dk, CostForm::ClosedForm);
    let cmp = |rival: u64| match b.cmp(&rival) {
        std::cmp::Ordering::Less => Crossover::BottleneckCheaper,
        std::cmp::Ordering::Equal => Crossover::Equal,
        std::cmp::Ordering::Greater => Crossover::RivalCheaper,
    };
    CrossoverReport { vs_lstm: cmp(lstm_cost(m, n, 1, dk)), vs_gru: cmp(gru_cost(m, n, 1, dk)) }
}

/// Parameters of one layer, biases included.
pub fn layer_params(layer: &LayerSpec, form: BottleneckForm, layout: GateLayout) -> u64 {
    let (k2, cin, cout) = ((layer.kernel * layer.kernel) as u64, layer.in_channels as u64, layer.out_channels as u64);
    let bias = if layer.bias { cout } else { 0 };
    bias + match layer.kind {
        LayerKind::FullConv | LayerKind::BoxHead => k2 * cin * cout,
        LayerKind::SeparableConv => k2 * cin + cin * cout,
        LayerKind::Recurrent(kind) => RecurrentConfig {
            kind,
            input_channels: layer.in_channels,
            output_channels: layer.out_channels,
            kernel: layer.kernel,
            form,
            layout,
        }
        .param_count() as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    /// Output spatial size (square).
    pub spatial: usize,
    /// Closed-form recurrent cost where one exists, else the layer sum.
    pub mac_closed_form: u64,
    /// Layer-by-layer sum, `params * spatial^2`.
    pub mac_layer_sum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub alphas: Alphas,
    pub resolution: usize,
    pub placement: String,
    pub lstm_type: String,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_mac_closed_form: u64,
    pub total_mac_layer_sum: u64,
    pub notes: Vec<String>,
}

/// Costs every layer of `arch` evaluated at `resolution`.
pub fn model_report(arch: &ArchSpec, resolution: usize) -> Result<CostReport> {
    let mut arch = arch.clone();
    arch.resolution = resolution;
    let spatial = arch.spatial()?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut notes = Vec::new();
    for (layer, sp) in arch.layers.iter().zip(&spatial) {
        let params = layer_params(layer, arch.form, arch.layout);
        let df = sp.output as u64;
        let mac_layer_sum = params * df * df;
        let (m, n) = (layer.in_channels as u64, layer.out_channels as u64);
        let k = layer.kernel as u64;
        let mac_closed_form = match layer.kind {
            LayerKind::Recurrent(RecurrentKind::ConvLstm) => lstm_cost(m, n, df, k),
            LayerKind::Recurrent(RecurrentKind::ConvGru) => gru_cost(m, n, df, k),
            LayerKind::Recurrent(RecurrentKind::BottleneckLstm) => {
                let excluded = (params - 4 * n * n) * df * df;
                notes.push(format!(
                    "{}: without the final N->4N gate pointwise convolution the layer has {} params and {} MAC",
                    layer.name,
                    params - 4 * n * n,
                    excluded
                ));
                bottleneck_cost(m, n, df, k, CostForm::ClosedForm)
            }
            _ => mac_layer_sum,
        };
        layers.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.as_str().to_owned(),
            params,
            spatial: sp.output,
            mac_closed_form,
            mac_layer_sum,
        });
    }
    Ok(CostReport {
        alphas: arch.alphas,
        resolution,
        placement: arch.placement.to_string(),
        lstm_type: arch.lstm_type.to_string(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_mac_closed_form: layers.iter().map(|l| l.mac_closed_form).sum(),
        total_mac_layer_sum: layers.iter().map(|l| l.mac_layer_sum).sum(),
        layers,
        notes,
    })
}

impl CostReport {
    pub fn empty(alphas: Alphas, resolution: usize) -> Self {
        CostReport {
            alphas,
            resolution,
            placement: "none".into(),
            lstm_type: String::new(),
            layers: Vec::new(),
            total_params: 0,
            total_mac_closed_form: 0,
            total_mac_layer_sum: 0,
            notes: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,mac_closed_form,mac_layer_sum\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.name, l.params, l.mac_closed_form, l.mac_layer_sum);
        }
        let _ = writeln!(s, "total,{},{},{}", self.total_params, self.total_mac_closed_form, self.total_mac_layer_sum);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "alpha {} (base {}, ssd {}, lstm {}), {}x{} input, placement {}, recurrent {}",
            self.alphas.base,
            self.alphas.base,
            self.alphas.ssd,
            self.alphas.lstm,
            self.resolution,
            self.resolution,
            self.placement,
            self.lstm_type
        );
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:>4} {:>12} {:>14} {:>14}",
            "layer", "kind", "D_F", "params", "mac_closed_form", "mac_layer_sum"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>4} {:>12} {:>14} {:>14}",
                l.name, l.kind, l.spatial, l.params, l.mac_closed_form, l.mac_layer_sum
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:>4} {:>12} {:>14} {:>14}",
            "total", "", "", self.total_params, self.total_mac_closed_form, self.total_mac_layer_sum
        );
        let _ = writeln!(
            s,
            "total: {:.3}M params, {:.3}B MAC (closed form) / {:.3}B MAC (layer sum)",
            self.total_params as f64 / 1e6,
            self.total_mac_closed_form as f64 / 1e9,
            self.total_mac_layer_sum as f64 / 1e9
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Cost of one recurrent layer placed after Conv13.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentRow {
    pub kind: RecurrentKind,
    pub m: u64,
    pub n: u64,
    pub df: u64,
    pub params: u64,
    pub mac_closed_form: u64,
    pub mac_layers: u64,
    /// Bottleneck only: layer sum with the final gate pointwise removed.
    pub mac_gate_excluded: Option<u64>,
}

/// Recurrent-layer comparison at the Conv13 site for width `alpha` and
/// the given input resolution (the site sees `resolution / 32`).
pub fn recurrent_comparison(alpha: f64, resolution: usize, layout: GateLayout) -> Vec<RecurrentRow> {
    let m = crate::arch::scale_channels(1024, NetPart::Base, alpha);
    let df = resolution.div_ceil(32) as u64;
    [RecurrentKind::Averaging, RecurrentKind::ConvLstm, RecurrentKind::ConvGru, RecurrentKind::BottleneckLstm]
        .into_iter()
        .map(|kind| {
            let n = if kind == RecurrentKind::BottleneckLstm {
                crate::arch::scale_channels(1024, NetPart::Lstm, alpha)
            } else {
                m
            };
            let cfg = RecurrentConfig::new(kind, m, n).with_layout(layout);
            let params = cfg.param_count() as u64;
            let (m, n) = (m as u64, n as u64);
            let mac_closed_form = match kind {
                RecurrentKind::Averaging => 0,
                RecurrentKind::ConvLstm => lstm_cost(m, n, df, 3),
                RecurrentKind::ConvGru => gru_cost(m, n, df, 3),
                RecurrentKind::BottleneckLstm => bottleneck_cost(m, n, df, 3, CostForm::ClosedForm),
            };
            RecurrentRow {
                kind,
                m,
                n,
                df,
                params,
                mac_closed_form,
                mac_layers: params * df * df,
                mac_gate_excluded: (kind == RecurrentKind::BottleneckLstm).then(|| (params - 4 * n * n) * df * df),
            }
        })
        .collect()
}
