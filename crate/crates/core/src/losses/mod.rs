//! Training objectives: supervised and region-masked detection terms,
//! pseudo-label gating, the similarity triplet term, the asymmetric
//! attribute loss and the composite objectives of each training mode.

mod asymmetric;
mod detection;
mod pseudo;
mod total;
mod triplet;

pub use asymmetric::{asymmetric_attribute_loss, asymmetric_attribute_loss_logits, AsymmetricLossParams, PROB_CLAMP};
pub use detection::{
    assign_level, center_cell, detection_losses, iou_loss_with_grad, labeled_region_loss, level_positives,
    multi_level_losses, region_masks, DetectionTerms, GradSink, Target,
};
pub use pseudo::{
    class_entropy, classify_prediction, compute_area_min, confidence_score, filter_pseudo_labels, footprint_masks,
    pseudo_label_loss, similarity_candidates, FilterRecord, GateReport, GateResults, PseudoLabel, SparseTrainConfig,
    TripletFormula, Verdict,
};
pub use total::{total_loss, triplet_active, LossParts, TrainMode};
pub use triplet::{cosine_similarity, triplet_loss, FeatureRef, TripletOutput};
