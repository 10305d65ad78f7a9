//! Federated training of per-device semantic links and aggregation of their
//! weights and task results.

mod aggregate;
mod link;
mod loss;
mod teacher;
mod train;

pub use aggregate::{
    aggregate_results_classification, aggregate_results_reconstruction, fedavg_aggregate, mean_scores, Panorama,
};
pub use link::{csi_loss, mimo_layer, ChannelBlock, LinkModel, LinkOutput, LinkSpec, Phase, TaskHead, TaskOutput};
pub use loss::{kd_loss, reconstruction_loss, smoothed_targets, KdLossConfig};
pub use teacher::{train_teacher, Teacher, TeacherConfig};
pub use train::{
    build_data, evaluate, local_update, mean_image_baseline, run_federated_training, DeviceState, Evaluation,
    FederatedData, Federation, LocalContext, LocalOutcome, RoundRecord,
};
