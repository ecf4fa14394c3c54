//! Zone-level spatial analysis: daily flow graphs, graph-convolutional zone
//! embeddings, effectiveness clustering, and infrastructure regression.

pub mod cluster;
pub mod gcn;
pub mod graphs;
pub mod regress;

pub use cluster::{cluster_zones, Category, KScore, ZoneClusterResult};
pub use gcn::{
    gcn_forward, gcn_forward_graph, gcn_train, gradient_check, mean_embeddings,
    normalized_adjacency, GcnMetrics, GcnModel, GcnParams, GradCheckResult, TrainedGcn,
};
pub use graphs::{build_daily_graphs, zone_outcomes, DailyGraphs, GraphEdge, ZoneGraph, ZoneOutcome};
pub use regress::{regress_infrastructure, zone_feature_rows, InfraRegression, INFRA_FEATURE_NAMES};
