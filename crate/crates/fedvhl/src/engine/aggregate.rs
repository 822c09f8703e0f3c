use crate::engine::{ClientUpdate, ScaffoldState};
use crate::error::{Error, Result};
use crate::nn::{Gradient, ModelParams};

fn check_weights(updates: &[ClientUpdate], weights: &[f64]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    if updates.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Aggregation("weights must be positive and finite".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Aggregation(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Weighted parameter mean over the selected clients.
pub fn aggregate_fedavg(updates: &[ClientUpdate], weights: &[f64]) -> Result<ModelParams> {
    check_weights(updates, weights)?;
    let mut out = updates[0].model.clone();
    out.scale(weights[0]);
    for (u, &w) in updates.iter().zip(weights).skip(1) {
        out.add_scaled(w, &u.model);
    }
    Ok(out)
}

/// Normalized averaging: per-client directions d_k = (w_r - w_k)/tau_k are
/// recombined with the effective step count tau_eff = sum p_k tau_k.
pub fn aggregate_fednova(
    global: &ModelParams,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<ModelParams> {
    check_weights(updates, weights)?;
    if updates.iter().any(|u| u.steps == 0) {
        return Err(Error::Aggregation("fednova requires every client to take a step".into()));
    }
    let tau_eff: f64 = updates
        .iter()
        .zip(weights)
        .map(|(u, &w)| w * u.steps as f64)
        .sum();
    let mut direction = Gradient::zeros_like(global);
    for (u, &w) in updates.iter().zip(weights) {
        let d = Gradient::from_param_diff(global, &u.model, 1.0 / u.steps as f64);
        direction.add_scaled(w, &d);
    }
    let mut out = global.clone();
    out.add_gradient_scaled(-tau_eff, &direction);
    Ok(out)
}

/// Option-II variate maintenance: install each selected client's replacement
/// variate and move the server variate by |S|/K times the mean change.
pub fn scaffold_server_update(
    state: &mut ScaffoldState,
    updates: &[ClientUpdate],
    total_clients: usize,
) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    let mut mean_delta = Gradient::zeros_matching(&state.server);
    for u in updates {
        let new = u
            .new_variate
            .as_ref()
            .ok_or_else(|| Error::Aggregation(format!("client {} sent no variate", u.client)))?;
        if u.client >= state.clients.len() {
            return Err(Error::Aggregation(format!("unknown client id {}", u.client)));
        }
        mean_delta.add_scaled(1.0 / updates.len() as f64, new);
        mean_delta.add_scaled(-1.0 / updates.len() as f64, &state.clients[u.client]);
        state.clients[u.client] = new.clone();
    }
    let fraction = updates.len() as f64 / total_clients as f64;
    state.server.add_scaled(fraction, &mean_delta);
    Ok(())
}

/// Mean L2 distance from the aggregate to each participating client's model.
pub fn client_drift<'a, I>(aggregated: &ModelParams, clients: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ModelParams>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for c in clients {
        total += aggregated.l2_distance(c);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Aggregation("drift over zero clients".into()));
    }
    Ok(total / count as f64)
}
