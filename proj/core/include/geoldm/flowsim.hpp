#pragma once

#include <string>

#include "geoldm/facies.hpp"

namespace geoldm::flowsim {

/// Unit conversion for Darcy flux in (mD, m, bar, cP, day) field units:
/// rate [m3/day] = kDarcy * k[mD] * A[m2] / L[m] * (kr/mu)[1/cP] * dp[bar].
inline constexpr double kDarcy = 8.527017312e-3;

struct FaciesRock {
    double phi = 0.0;
    double perm = 0.0; // mD
};

struct RockFluidProps {
    // per-facies porosity / permeability, indexed by facies code
    FaciesRock rock[3] = {{0.05, 50.0}, {0.15, 400.0}, {0.20, 2500.0}};
    double mu_w = 0.31; // cP
    double mu_o = 1.09; // cP
    // Corey relative permeability
    double swc = 0.10;
    double sor = 0.20;
    double krw_end = 0.4;
    double kro_end = 1.0;
    double nw = 2.0;
    double no = 2.0;
    // initial state
    double sw_init = 0.10;
    double p_init = 310.0; // bar
    // slight fluid compressibility, 1/bar
    double c_w = 4.0e-5;
    double c_o = 1.0e-4;

    void validate() const;
};

enum class WellKind { injector, producer };

struct WellSpec {
    std::string name;
    int i = 0, j = 0;
    WellKind kind = WellKind::injector;
    double bhp = 0.0; // bar
    double rw = 0.1;  // m
};

struct GridGeometry {
    double dx = 20.0, dy = 20.0, dz = 5.0; // m
};

/// Interval-averaged well rates at each report time (positive magnitudes in
/// the well's own role: injection for injectors, production for producers).
struct WellSeries {
    std::vector<double> times; // days, strictly increasing
    std::vector<std::string> well_names;
    std::vector<std::vector<double>> water_rate; // [well][report], m3/day
    std::vector<std::vector<double>> oil_rate;   // [well][report]
    std::vector<double> field_injection;
    std::vector<double> field_oil_production;
    std::vector<double> field_water_production;
};

/// Conservation bookkeeping evaluated at every report step (worst values kept).
struct SimAudit {
    double max_total_balance_err = 0.0; // |inj - prod - storage| / inj
    double max_water_balance_err = 0.0;
    double max_sat_overshoot = 0.0;
    double cumulative_injected = 0.0; // m3
};

struct SimOptions {
    double t_end = 2500.0;      // days
    double max_dt = 50.0;       // days (pressure step and report interval cap)
    double report_every = 50.0; // days
    double cfl = 0.5;
    double sat_tol = 1e-6; // permitted saturation overshoot before erroring
};

struct SimResult {
    WellSeries series;
    SimAudit audit;
    std::vector<double> final_pressure;
    std::vector<double> final_sw;
};

/// Per-cell (porosity, permeability) lookup from facies codes.
std::pair<std::vector<double>, std::vector<double>> assign_properties(const FaciesGrid& grid,
                                                                      const RockFluidProps& props);

/// Corey curves: krw = krw_end * Se^nw, kro = kro_end * (1-Se)^no with
/// Se = (Sw - Swc) / (1 - Swc - Sor). Sw must lie in [Swc, 1 - Sor].
std::pair<double, double> relperm(double sw, const RockFluidProps& props);

/// Peaceman well index for a vertical well in an anisotropic cell, including
/// the unit conversion; multiply by a phase mobility (1/cP) and a pressure
/// difference (bar) to get a rate in m3/day.
double peaceman_index(double dx, double dy, double dz, double kx, double ky, double rw);

/// IMPES: implicit pressure (two-point flux, harmonic transmissibility,
/// lagged potential upwinding), explicit CFL-sub-stepped saturation transport,
/// BHP wells via mobility-weighted Peaceman inflow.
SimResult simulate(const FaciesGrid& grid, const RockFluidProps& props,
                   std::span<const WellSpec> wells, const GridGeometry& geom,
                   const SimOptions& opts);

/// Observation stacking: for each report time (every, 2*every, ..., until),
/// producers in well-list order contribute (oil rate, water rate), then
/// injectors in list order contribute (water rate). Time-major.
std::vector<double> extract_observations(const WellSeries& series, std::span<const WellSpec> wells,
                                         double every, double until);
/// Position labels matching extract_observations, e.g. "t300:P1:oil".
std::vector<std::string> observation_labels(std::span<const WellSpec> wells, double every,
                                            double until);

void write_series_csv(const std::filesystem::path& path, const WellSeries& series);

/// Wells of the reference five-spot-style pattern (three injectors, two
/// producers) placed at the conditioning locations, scaled to the grid size.
std::vector<WellSpec> reference_wells(int nx, int ny, double bhp_inj = 330.0,
                                      double bhp_prod = 300.0);
/// The matching five conditioning points (channel facies at every well).
ConditioningSet reference_conditioning(int nx, int ny);

} // namespace geoldm::flowsim
