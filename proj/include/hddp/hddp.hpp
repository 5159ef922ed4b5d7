#pragma once

#include "hddp/belief_ddp.hpp"
#include "hddp/boxqp.hpp"
#include "hddp/ddp.hpp"
#include "hddp/envs/box.hpp"
#include "hddp/envs/car.hpp"
#include "hddp/filter.hpp"
#include "hddp/harness.hpp"
#include "hddp/hybrid.hpp"
#include "hddp/problem.hpp"
#include "hddp/value.hpp"
