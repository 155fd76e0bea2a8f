//! Building blocks for bootstrapping a never-ending language learner in a new
//! language: corpus indexing into all-pairs co-occurrence tables, ontology
//! seeding from spreadsheets, coupled pattern/instance bootstrapping, and a
//! replayable knowledge-base log with RDF export.

pub mod allpairs;
pub mod corpus;
pub mod kbstore;
pub mod learner;
pub mod ontology;
