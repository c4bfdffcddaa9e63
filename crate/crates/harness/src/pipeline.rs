//! Inference building blocks shared by training and evaluation.

use adascan_core::detector::{Detection, Detector};
use adascan_core::geometry::Vec3;
use adascan_core::maskgen::MaskGenerator;
use adascan_core::predictor::{BufferFrame, Predictor, QueryBuffer};
use numkernel::{Tape, Tensor};

use crate::data::FrameData;
use crate::error::Result;

/// Detector output kept for the buffer and for scoring.
#[derive(Clone, Debug)]
pub struct DetectOut {
    /// Per decoder layer, `[n_q, d]`.
    pub queries: Vec<Tensor>,
    /// Last-layer detections.
    pub dets: Vec<Detection>,
}

/// Gradient-free detector forward.
pub fn detect(det: &Detector, points: &[Vec3], camera: &Tensor, alpha: f64) -> Result<DetectOut> {
    let mut tape = Tape::new();
    let p = det.bind(&mut tape, false);
    let pts = tape.constant(Detector::point_features(points));
    let (out, _) = det.forward(&mut tape, &p, pts, camera, alpha)?;
    let queries = out.stack.iter().map(|&q| tape.value(q).clone()).collect();
    let dets = det.detections(&tape, out.heads.last().unwrap());
    Ok(DetectOut { queries, dets })
}

pub fn buffer_frame(out: &DetectOut, frame: &FrameData, score_floor: f64) -> BufferFrame {
    BufferFrame::from_detections(out.queries.clone(), &out.dets, frame.rotation, frame.timestamp, score_floor)
}

/// Predicted queries for the next frame, their decoded detections and the
/// mask logits (`[blocks, 2]`, row-major).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub queries: Vec<Tensor>,
    pub dets: Vec<Detection>,
    pub logits: Vec<f64>,
}

pub fn predict(det: &Detector, pred: &Predictor, mg: &MaskGenerator, buffer: &QueryBuffer) -> Result<Prediction> {
    let mut tape = Tape::new();
    let pd = det.bind(&mut tape, false);
    let pp = pred.bind(&mut tape, false);
    let pm = mg.bind(&mut tape, false);
    let stack = pred.predict(&mut tape, &pp, buffer)?;
    let heads = det.decode_stack(&mut tape, &pd, &stack)?;
    let dets = det.detections(&tape, heads.last().unwrap());
    let centers: Vec<Vec3> = dets.iter().map(|d| d.center).collect();
    let weights: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let z = mg.logits(&mut tape, &pm, &stack, &centers, &weights)?;
    Ok(Prediction {
        queries: stack.iter().map(|&q| tape.value(q).clone()).collect(),
        dets,
        logits: tape.value(z).data().to_vec(),
    })
}
