pub mod gradcheck;
pub mod oracle;
pub mod params;
pub mod sweep;
pub mod train;
