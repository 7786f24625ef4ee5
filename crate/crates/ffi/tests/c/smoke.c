#include <stdio.h>
#include <stdlib.h>
#include <math.h>
#include "steerflow.h"

#define CHECK(call)                                              \
    do {                                                         \
        SfStatus st_ = (call);                                   \
        if (st_ != SF_STATUS_OK) {                               \
            char msg_[256];                                      \
            sf_last_error(msg_, sizeof msg_);                    \
            fprintf(stderr, "%s -> %d: %s\n", #call, st_, msg_); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    const char *json =
        "{\"params\":{\"tau\":0.8,\"body_force\":[1e-5,0],\"inflow_velocity\":[0,0]},"
        "\"plan\":{\"base_resolution\":[16,16]},\"boundary\":\"periodic\"}";
    SfScene *scene = NULL;
    SfSolver *solver = NULL;
    CHECK(sf_scene_from_json(json, &scene));
    CHECK(sf_solver_new(scene, 0, &solver));
    size_t nx = 0, ny = 0;
    CHECK(sf_solver_size(solver, &nx, &ny));
    double m0 = 0, m1 = 0;
    CHECK(sf_solver_total_mass(solver, &m0));
    CHECK(sf_solver_step(solver, 50));
    CHECK(sf_solver_total_mass(solver, &m1));
    double *ux = malloc(nx * ny * sizeof *ux);
    CHECK(sf_solver_field(solver, 1, ux, nx * ny));
    if (sf_solver_field(solver, 7, ux, nx * ny) != SF_STATUS_INVALID_ARGUMENT) return 2;
    printf("%zux%zu mass drift %.3e ux[0] %.6e\n", nx, ny, fabs(m1 - m0) / m0, ux[0]);
    free(ux);
    sf_solver_free(solver);
    sf_scene_free(scene);
    return fabs(m1 - m0) / m0 < 1e-12 ? 0 : 3;
}
