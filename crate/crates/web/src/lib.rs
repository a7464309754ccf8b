// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo on a planted model: show patch norms, shift the outlier to a
//! clicked patch, and absorb it into a test-time register.
//!
//! [`Session`] holds the logic and runs natively; [`Demo`] is its JavaScript
//! face.

use regforge::analysis::{cls_attention_row, find_outliers, patch_norm_map};
use regforge::registers::{apply_plan, plan_shift, plan_test_time_register};
use regforge::synthetic::{generate_planted_model, PlantSpec, PlantedImage, PlantedModel};
use regforge::vit::{patch_token, RegisterInit, Site, TapSpec, TokenSequence, Vit};
use regforge::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Patch norms of one run, plus where the outliers are.
#[derive(Debug, Clone, Serialize)]
pub struct View {
    /// Row-major `grid × grid` norms at the outlier layer.
    pub norms: Vec<f32>,
    /// Outlier patches as `(row, col)`.
    pub outliers: Vec<(usize, usize)>,
    pub threshold: f32,
    /// Norm of each test-time register, when any were added.
    pub register_norms: Vec<f32>,
    /// Head-averaged CLS attention on the registers at the last layer.
    pub cls_on_registers: f32,
    /// Head-averaged CLS attention on each patch at the last layer.
    pub cls_attention: Vec<f32>,
}

pub struct Session {
    model: PlantedModel,
    vit: Vit,
    image: PlantedImage,
    seq: TokenSequence,
    draws: u64,
}

impl Session {
    pub fn new(seed: u64) -> Result<Self> {
        let model = generate_planted_model(&PlantSpec::sample(seed))?;
        let vit = model.vit()?;
        let image = model.images(1, 0).remove(0);
        let seq = model.embed(&vit, &image)?;
        Ok(Self {
            model,
            vit,
            image,
            seq,
            draws: 0,
        })
    }

    pub fn grid(&self) -> usize {
        self.model.config.grid()
    }

    pub fn image_size(&self) -> usize {
        self.image.image.width
    }

    /// RGBA bytes of the current image, for a canvas.
    pub fn image_rgba(&self) -> Vec<u8> {
        self.image
            .image
            .data
            .chunks(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }

    /// Draws the next image from the model's image distribution.
    pub fn next_image(&mut self) -> Result<()> {
        self.draws += 1;
        self.image = self.model.images(1, self.draws).remove(0);
        self.seq = self.model.embed(&self.vit, &self.image)?;
        Ok(())
    }

    fn taps(&self) -> TapSpec {
        let last = self.model.config.n_layers - 1;
        TapSpec::none()
            .with(self.model.truth.analysis_layer, Site::PostMlpResidual)
            .with(last, Site::AttentionWeights)
    }

    fn view(&self, seq: &TokenSequence, trace: &regforge::vit::ActivationTrace) -> Result<View> {
        let t = &self.model.truth;
        let g = self.grid();
        let offset = usize::from(self.model.config.has_cls);
        let norms = patch_norm_map(trace, t.analysis_layer, Site::PostMlpResidual)?;
        let found = find_outliers(trace, t.analysis_layer, t.threshold)?;
        let residual = trace.get(t.analysis_layer, Site::PostMlpResidual)?;
        let regs = seq.register_indices();
        let register_norms = regs
            .iter()
            .map(|&r| residual.row(r).iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect();
        let row = cls_attention_row(trace, self.model.config.n_layers - 1)?;
        Ok(View {
            norms: norms.data().to_vec(),
            outliers: found
                .positions
                .iter()
                .map(|&p| ((p - offset) / g, (p - offset) % g))
                .collect(),
            threshold: t.threshold,
            register_norms,
            cls_on_registers: regs.iter().map(|&r| row[r]).sum(),
            cls_attention: seq.patch_indices().iter().map(|&p| row[p]).collect(),
        })
    }

    /// The unedited model.
    pub fn baseline(&self) -> Result<View> {
        let trace = self.vit.forward(&self.seq, &self.taps(), &[])?.trace;
        self.view(&self.seq, &trace)
    }

    /// Moves every planted neuron's peak onto one patch.
    pub fn shift_to(&self, row: usize, col: usize) -> Result<View> {
        let g = self.grid();
        if row >= g || col >= g {
            return Err(regforge::Error::Index {
                what: "patch",
                index: row * g + col,
                len: g * g,
            });
        }
        let target = patch_token(&self.model.config, row, col);
        let plan = plan_shift(&self.model.truth.planted, &[target])?;
        let run = apply_plan(&self.vit, &self.seq, &plan, &self.taps(), None)?;
        self.view(&run.seq, &run.output.trace)
    }

    /// Appends `count` zero-initialized registers that take the outlier.
    pub fn add_registers(&self, count: usize) -> Result<View> {
        let plan = plan_test_time_register(&self.model.truth.planted, count, RegisterInit::Zeros)?;
        let run = apply_plan(&self.vit, &self.seq, &plan, &self.taps(), None)?;
        self.view(&run.seq, &run.output.trace)
    }

    pub fn truth_json(&self) -> String {
        serde_json::to_string(&self.model.truth).expect("truth serializes")
    }
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JavaScript handle on a [`Session`]. Views come back as JSON strings.
#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Session::new(seed as u64)
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn grid(&self) -> usize {
        self.0.grid()
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.0.image_size()
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        self.0.image_rgba()
    }

    #[wasm_bindgen(js_name = nextImage)]
    pub fn next_image(&mut self) -> std::result::Result<(), JsError> {
        self.0.next_image().map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn baseline(&self) -> std::result::Result<String, JsError> {
        js(self.0.baseline())
    }

    #[wasm_bindgen(js_name = shiftTo)]
    pub fn shift_to(&self, row: usize, col: usize) -> std::result::Result<String, JsError> {
        js(self.0.shift_to(row, col))
    }

    #[wasm_bindgen(js_name = addRegisters)]
    pub fn add_registers(&self, count: usize) -> std::result::Result<String, JsError> {
        js(self.0.add_registers(count))
    }

    pub fn truth(&self) -> String {
        self.0.truth_json()
    }
}
