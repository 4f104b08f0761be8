#pragma once

// Umbrella header. service.hpp is left out because it pulls in httplib and
// needs Threads; include it directly where the HTTP server is wanted.

#include "tdce/error.hpp"
#include "tdce/random.hpp"
#include "tdce/nn.hpp"
#include "tdce/data.hpp"
#include "tdce/diffusion.hpp"
#include "tdce/guidance.hpp"
#include "tdce/metrics.hpp"
#include "tdce/theory.hpp"
#include "tdce/pipeline.hpp"
