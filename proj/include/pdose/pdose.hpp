#pragma once

#include "pdose/error.hpp"
#include "pdose/random.hpp"
#include "pdose/phantom.hpp"
#include "pdose/analytic1d.hpp"
#include "pdose/transport.hpp"
#include "pdose/mlp.hpp"
#include "pdose/train.hpp"
#include "pdose/checkpoint.hpp"
#include "pdose/uq.hpp"
#include "pdose/dataset.hpp"
#include "pdose/svg.hpp"
#include "pdose/report.hpp"
#include "pdose/experiments.hpp"
