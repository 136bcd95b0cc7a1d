//! Instance pools, scenario-driven bag assembly and dataset files.

mod bag;
mod dataset;
mod pool;
mod scenario;

pub use bag::{assemble_bag, draw_class_counts, majority_of_counts, BagRecord};
pub use dataset::{
    make_dataset, read_bags_jsonl, read_dataset, write_bags_jsonl, write_dataset, Dataset,
    DatasetManifest, SplitFractions, SplitSizes,
};
pub use pool::{class_centers, generate_gaussian_pool, load_pool_csv, InstancePool};
pub use scenario::{BagSize, Scenario, ScenarioSpec};
