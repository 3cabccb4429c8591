pub mod cli;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod evaluation;
pub mod gateway;
pub mod jsonl;
pub mod patterns;
pub mod prompts;
pub mod synthesis;
