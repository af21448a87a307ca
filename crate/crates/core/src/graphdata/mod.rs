//! Propagation-event data model, adjacency views, JSONL I/O and the
//! planted-token synthetic generator.

mod adjacency;
mod event;
mod io;
mod synthetic;

pub use adjacency::{build_adjacency, propagation_operator, AdjacencyViews};
pub use event::{Post, PropagationEvent};
pub use io::{
    event_to_json, events_to_jsonl, load_events, parse_events, save_events, PlantedRegistry,
    Vocabulary, PAD, UNK,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset, RESERVED_TOKENS};
