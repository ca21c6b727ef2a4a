pub mod aggregate;
pub mod analysis;
pub mod event;
pub mod fsm;
pub mod reconstruct;
pub mod render;
pub mod sht;
pub mod sim;
pub mod span;
pub mod verify;
