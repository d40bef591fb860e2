//! The shared region proposal machinery: anchor grids, IoU labeling and
//! proposal selection. The tensor-level forward passes that feed these pieces
//! live in [`crate::model`].

mod anchors;
mod labeling;
mod proposals;

pub use anchors::{generate_anchors, AnchorGrid};
pub use labeling::{label_boxes, sample_minibatch, Label, Labeled, NEGATIVE_IOU};
pub use proposals::{decode_proposals, nms, select_top_k, Proposal};
