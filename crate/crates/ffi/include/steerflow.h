#ifndef STEERFLOW_H
#define STEERFLOW_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_PARSE_ERROR = 3,
  SF_STATUS_SOLVER_ERROR = 4,
  SF_STATUS_IO_ERROR = 5,
  SF_STATUS_BUFFER_TOO_SMALL = 6,
  SF_STATUS_PANIC = 7,
} SfStatus;

/**
 * Opaque scene description.
 */
typedef struct SfScene SfScene;

/**
 * Opaque steering session with its network listeners.
 */
typedef struct SfServer SfServer;

/**
 * Opaque lattice solver for one level of a scene.
 */
typedef struct SfSolver SfSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len` bytes. Returns the full
 * message length excluding the terminator.
 */
size_t sf_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

enum SfStatus sf_scene_from_json(const char *json, struct SfScene **out);

void sf_scene_free(struct SfScene *scene);

/**
 * Cold-start solver for `level` of `scene`.
 */
enum SfStatus sf_solver_new(const struct SfScene *scene, uint32_t level, struct SfSolver **out);

void sf_solver_free(struct SfSolver *solver);

enum SfStatus sf_solver_size(const struct SfSolver *solver, size_t *nx, size_t *ny);

enum SfStatus sf_solver_step(struct SfSolver *solver, uint64_t steps);

/**
 * Step until quasi-steady or the plan's step cap. Writes the steps taken
 * and whether the residual threshold was reached.
 */
enum SfStatus sf_solver_run_to_steady(struct SfSolver *solver, uint64_t *steps, bool *converged);

enum SfStatus sf_solver_total_mass(const struct SfSolver *solver, double *mass);

/**
 * Copy a macroscopic field (0 rho, 1 ux, 2 uy, 3 temp) into `out`,
 * row-major with `nx * ny` values.
 */
enum SfStatus sf_solver_field(const struct SfSolver *solver,
                              uint32_t field,
                              double *out,
                              size_t len);

/**
 * Write one field as a binary field dump.
 */
enum SfStatus sf_solver_write_dump(const struct SfSolver *solver, uint32_t field, const char *path);

/**
 * Start a steering session on a copy of `scene` and listen on `port`
 * (raw TCP) and `ws_port` (WebSocket and static files); 0 picks free
 * ports. `token` may be null to disable authentication.
 */
enum SfStatus sf_server_start(const struct SfScene *scene,
                              uint16_t port,
                              uint16_t ws_port,
                              size_t slaves,
                              size_t traders,
                              const char *token,
                              struct SfServer **out);

/**
 * Bound ports of a running server.
 */
enum SfStatus sf_server_ports(const struct SfServer *server, uint16_t *port, uint16_t *ws_port);

/**
 * Stop listening, end the session and release the handle.
 */
void sf_server_free(struct SfServer *server);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEERFLOW_H */
