pub mod clients;
pub mod consistency;
pub mod corpus;
pub mod decontam;
pub mod evalharness;
pub mod index;
pub mod pipeline;
pub mod scalinglaw;
