#pragma once

#include "microturn/error.hpp"
#include "microturn/protocol.hpp"
#include "microturn/rng.hpp"
#include "microturn/ingest.hpp"
#include "microturn/policy.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/scenarios.hpp"
#include "microturn/oracle.hpp"
#include "microturn/remote_policy.hpp"
#include "microturn/trials.hpp"
#include "microturn/constructor.hpp"
#include "microturn/metrics.hpp"
#include "microturn/sweep.hpp"
#include "microturn/service.hpp"
