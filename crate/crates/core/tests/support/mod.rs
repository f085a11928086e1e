pub mod core_criteria;
