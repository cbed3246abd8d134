//! Process-wide numeric backend switches.

use std::sync::Once;

const HIGHER_ORDER_VAR: &str = "CANDLE_GRAD_DO_NOT_DETACH";

/// Environment variable that forces the deterministic numeric mode.
pub const DETERMINISTIC_VAR: &str = "PSSG_DETERMINISTIC";

/// Keeps gradient graphs alive during backpropagation so that gradients can
/// themselves be differentiated (needed by the R1 penalty).
///
/// The backend reads the switch once per thread, on the thread's first
/// backward pass, so this must run before any gradient is taken on a thread
/// that later needs second-order terms.
pub fn enable_higher_order_gradients() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if std::env::var_os(HIGHER_ORDER_VAR).is_none() {
            std::env::set_var(HIGHER_ORDER_VAR, "1");
        }
    });
}

/// True when `PSSG_DETERMINISTIC=1`.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_VAR).map(|v| v == "1").unwrap_or(false)
}

/// Pins the backend to a single worker thread so reductions happen in a
/// fixed order. Call before any tensor work.
pub fn enter_deterministic_mode() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
}
