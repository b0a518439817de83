//! Command-line surface: configuration, the checkpoint container, prompt
//! directives and loss-curve export.

mod artifact;
mod checkpoint;
mod commands;
mod config;
mod io;
mod prompt;

pub use artifact::{
    bundle_checkpoint, bundle_from_checkpoint, hypernet_checkpoint, hypernet_from_checkpoint, load_bundle,
    lora_checkpoint, lora_from_checkpoint, save_bundle, ti_checkpoint, ti_from_checkpoint,
};
pub use checkpoint::{read_header, Checkpoint, Header, TensorEntry, FORMAT_VERSION, MAGIC};
pub use commands::{execute, main_with_args, resolve_config, Cli, Command, FinetuneArgs, FinetuneMethod, TrainFlags};
pub use config::{
    DatasetSection, DreamboothSection, HypernetSection, LoraSection, PretrainSection, RunConfig, SamplerSection,
    ScheduleConfig, TiSection, VaeSection,
};
pub use io::{export_loss_csv, loss_csv, write_atomic};
pub use prompt::{parse_prompt, DirectiveKind, PromptDirective};
